//! Byte-exact parameter serialization.
//!
//! Layout: an 8-byte magic (`BPOCKPT1`), the four dimensions as
//! little-endian `u32` (vocab, window, embed, hidden), then every parameter
//! as a little-endian `f64` in flat-layout order. Encoding and decoding
//! round-trip bit patterns exactly, so checkpoints double as reproducibility
//! witnesses: two runs agree iff their checkpoint bytes agree.

use alloc::vec::Vec;

use crate::policy::{PolicyDims, PolicyParams};

/// File magic identifying checkpoint version 1.
pub const MAGIC: [u8; 8] = *b"BPOCKPT1";

const HEADER_LEN: usize = 8 + 4 * 4;

/// Errors from decoding a checkpoint.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    /// The first eight bytes are not the checkpoint magic.
    #[error("bad checkpoint magic")]
    BadMagic,
    /// The byte stream ends mid-header or mid-coefficient.
    #[error("truncated checkpoint")]
    Truncated,
    /// The header dimensions are not a valid policy shape.
    #[error("checkpoint header encodes invalid dimensions")]
    InvalidDims,
    /// The payload length disagrees with the header dimensions.
    #[error("checkpoint payload has {got} coefficients, dimensions imply {expected}")]
    DimsMismatch {
        /// Coefficient count implied by the header.
        expected: usize,
        /// Coefficient count actually present.
        got: usize,
    },
}

/// Serializes `params` to checkpoint bytes.
pub fn encode(params: &PolicyParams) -> Vec<u8> {
    let d = params.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.flat().len());
    out.extend_from_slice(&MAGIC);
    for dim in [d.vocab, d.window, d.embed, d.hidden] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &x in params.flat() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Deserializes checkpoint bytes back into parameters.
pub fn decode(bytes: &[u8]) -> Result<PolicyParams, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated);
    }
    if bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated);
    }
    let mut dims = [0usize; 4];
    for (k, dim) in dims.iter_mut().enumerate() {
        let at = MAGIC.len() + 4 * k;
        let mut raw = [0u8; 4];
        raw.copy_from_slice(&bytes[at..at + 4]);
        *dim = u32::from_le_bytes(raw) as usize;
    }
    let dims = PolicyDims {
        vocab: dims[0],
        window: dims[1],
        embed: dims[2],
        hidden: dims[3],
    };
    dims.validate().map_err(|_| CheckpointError::InvalidDims)?;

    let payload = &bytes[HEADER_LEN..];
    if !payload.len().is_multiple_of(8) {
        return Err(CheckpointError::Truncated);
    }
    let got = payload.len() / 8;
    let expected = dims.param_count();
    if got != expected {
        return Err(CheckpointError::DimsMismatch { expected, got });
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|chunk| {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(chunk);
            f64::from_le_bytes(raw)
        })
        .collect();
    PolicyParams::new(dims, flat).map_err(|_| CheckpointError::InvalidDims)
}
