//! `.cvqn` bitstream layout:
//!
//! ```text
//! "CVQN" | version u8 | H u16 | W u16 | C u8 | G u8
//! G × (q_g u8, C_g u8)
//! permutation: C bytes
//! G × μ table: q_g × f32 little-endian
//! G × (u32 length, payload bytes)
//! ```
//!
//! All other multi-byte integers are big-endian.

use crate::arith::{read_payload, write_payload};
use crate::controller::validate_permutation;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVQN";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupHeader {
    pub levels: u8,
    pub channels: u8,
    pub mu: Vec<f32>,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub height: u16,
    pub width: u16,
    pub permutation: Vec<u8>,
    pub groups: Vec<GroupHeader>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptStream(msg.into())
}

impl Container {
    pub fn channels(&self) -> usize {
        self.permutation.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.len() > 255 {
            return Err(corrupt(format!("{} groups", self.groups.len())));
        }
        if self.permutation.is_empty() || self.permutation.len() > 255 {
            return Err(corrupt(format!("{} channels", self.permutation.len())));
        }
        let total: usize = self.groups.iter().map(|g| g.channels as usize).sum();
        if total != self.channels() {
            return Err(corrupt(format!("group sizes sum to {total}, header says {}", self.channels())));
        }
        for (k, g) in self.groups.iter().enumerate() {
            if g.levels == 0 || g.channels == 0 || g.mu.len() != g.levels as usize {
                return Err(corrupt(format!("group {k}: {} levels, {} channels, {} means", g.levels, g.channels, g.mu.len())));
            }
        }
        let perm: Vec<usize> = self.permutation.iter().map(|&p| p as usize).collect();
        validate_permutation(&perm).map_err(|_| corrupt("permutation is not a bijection"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        out.push(self.channels() as u8);
        out.push(self.groups.len() as u8);
        for g in &self.groups {
            out.push(g.levels);
            out.push(g.channels);
        }
        out.extend_from_slice(&self.permutation);
        for g in &self.groups {
            for m in &g.mu {
                out.extend_from_slice(&m.to_le_bytes());
            }
        }
        for g in &self.groups {
            write_payload(&mut out, &g.payload)?;
        }
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| corrupt("container truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = take(1)?[0];
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let height = u16::from_be_bytes(take(2)?.try_into().unwrap());
        let width = u16::from_be_bytes(take(2)?.try_into().unwrap());
        let c = take(1)?[0] as usize;
        let g = take(1)?[0] as usize;
        let mut groups: Vec<GroupHeader> = take(2 * g)?
            .chunks_exact(2)
            .map(|p| GroupHeader {
                levels: p[0],
                channels: p[1],
                mu: Vec::new(),
                payload: Vec::new(),
            })
            .collect();
        let permutation = take(c)?.to_vec();
        for gr in groups.iter_mut() {
            gr.mu = take(4 * gr.levels as usize)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
        }
        let mut rest = &bytes[pos..];
        for gr in groups.iter_mut() {
            let (body, tail) = read_payload(rest)?;
            gr.payload = body.to_vec();
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", rest.len())));
        }
        let out = Self {
            height,
            width,
            permutation,
            groups,
        };
        out.validate()?;
        Ok(out)
    }
}
