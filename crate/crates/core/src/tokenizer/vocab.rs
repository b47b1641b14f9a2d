use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const RESERVED: [&str; 4] = [PAD, CLS, UNK, MASK];

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const MASK_ID: u32 = 3;

/// Bijective token ↔ id map with the four reserved tokens at ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from training sequences; ids follow first occurrence.
    pub fn build<I, S>(sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[String]>,
    {
        let mut v = Self::reserved_only();
        let mut any = false;
        for seq in sequences {
            any = true;
            for t in seq.as_ref() {
                if !v.index.contains_key(t) {
                    v.push(t.clone());
                }
            }
        }
        if !any {
            return Err(Error::validation(
                "cannot build a vocabulary from no sequences",
            ));
        }
        Ok(v)
    }

    fn reserved_only() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t.to_string());
        }
        v
    }

    fn push(&mut self, t: String) {
        self.index.insert(t.clone(), self.tokens.len() as u32);
        self.tokens.push(t);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `[UNK]`.
    pub fn encode(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn decode(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the newline-joined token list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One token per line; line `i` (0-based) holds id `i`.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(|e| Error::io("<vocabulary>", e))?;
        }
        w.flush().map_err(|e| Error::io("<vocabulary>", e))
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<vocabulary>", e))?;
            if v.index.contains_key(&line) {
                return Err(Error::Record {
                    line: i + 1,
                    message: format!("duplicate token {line:?}"),
                });
            }
            if i < RESERVED.len() && line != RESERVED[i] {
                return Err(Error::Record {
                    line: i + 1,
                    message: format!("expected reserved token {}", RESERVED[i]),
                });
            }
            v.push(line);
        }
        if v.len() < RESERVED.len() {
            return Err(Error::validation("vocabulary file lacks reserved tokens"));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}
