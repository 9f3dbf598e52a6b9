//! Length-prefixed frames of the TCP worker protocol.
//!
//! A frame is `opcode (u8) ‖ payload length (u32, little-endian) ‖ payload`.
//! Real vectors travel as consecutive little-endian `f64`s.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Refuse frames larger than this; shards are the only large payloads.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    LoadShard = 0x01,
    EvalGrad = 0x02,
    GradReply = 0x03,
    LocalMinReq = 0x04,
    LocalMinReply = 0x05,
    Shutdown = 0x06,
    Error = 0x7F,
}

impl Opcode {
    pub fn from_byte(b: u8) -> Option<Opcode> {
        Some(match b {
            0x01 => Opcode::LoadShard,
            0x02 => Opcode::EvalGrad,
            0x03 => Opcode::GradReply,
            0x04 => Opcode::LocalMinReq,
            0x05 => Opcode::LocalMinReply,
            0x06 => Opcode::Shutdown,
            0x7F => Opcode::Error,
            _ => return None,
        })
    }
}

/// A decoded frame. The opcode byte is kept raw so unknown opcodes can be
/// reported rather than lost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: Opcode, payload: Vec<u8>) -> Self {
        Self {
            opcode: opcode as u8,
            payload,
        }
    }

    pub fn vector(opcode: Opcode, v: &DVector<f64>) -> Self {
        Self::new(opcode, encode_reals(v.as_slice()))
    }

    pub fn error(message: &str) -> Self {
        Self::new(Opcode::Error, message.as_bytes().to_vec())
    }

    pub fn kind(&self) -> Option<Opcode> {
        Opcode::from_byte(self.opcode)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let len = u32::try_from(self.payload.len())
            .ok()
            .filter(|&l| l <= MAX_PAYLOAD)
            .ok_or_else(|| {
                Error::Protocol(format!("payload of {} bytes too large", self.payload.len()))
            })?;
        let mut buf = Vec::with_capacity(5 + self.payload.len());
        buf.push(self.opcode);
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(&self.payload);
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame> {
        let mut head = [0u8; 5];
        r.read_exact(&mut head)?;
        let len = u32::from_le_bytes([head[1], head[2], head[3], head[4]]);
        if len > MAX_PAYLOAD {
            return Err(Error::Protocol(format!(
                "declared payload of {len} bytes too large"
            )));
        }
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload)?;
        Ok(Frame {
            opcode: head[0],
            payload,
        })
    }

    pub fn reals(&self) -> Result<Vec<f64>> {
        decode_reals(&self.payload)
    }
}

pub fn encode_reals(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn decode_reals(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Protocol(format!(
            "payload of {} bytes is not a whole number of reals",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}
