//! Binary checkpoints.
//!
//! Network blob:
//!
//! ```text
//! "BSIM1" 'N' | u32 config_len | config JSON | u64 step_count
//!             | u64 n | n x f64 parameters | sha256 (32 bytes)
//! ```
//!
//! Sampler file:
//!
//! ```text
//! "BSIM1" 'S' | u32 config_len | SamplerConfig JSON | u64 retrain_count | u32 m
//!             | m x u64 blob lengths | m network blobs | sha256 (32 bytes)
//! ```
//!
//! Integers and floats are little-endian; the trailing digest covers every
//! preceding byte.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{NetworkConfig, NetworkParams};
use crate::posterior::{Sampler, SamplerConfig};

pub const MAGIC: &[u8; 4] = b"BSIM";
pub const VERSION: u8 = b'1';
const TAG_NETWORK: u8 = b'N';
const TAG_SAMPLER: u8 = b'S';
const HEADER_LEN: usize = 6;
const DIGEST_LEN: usize = 32;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length overflows".into()))
    }

    fn done(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Integrity(format!(
                "{} trailing bytes in checkpoint",
                self.buf.len() - self.pos
            )))
        }
    }
}

/// Check magic, version, tag and digest; return the body between header and digest.
fn open(bytes: &[u8], tag: u8) -> Result<&[u8]> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not a bsim checkpoint (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[..5]).into_owned(),
            expected: format!("BSIM{}", VERSION as char),
        });
    }
    if bytes[5] != tag {
        return Err(Error::Integrity(format!(
            "expected a {} checkpoint, found tag {:?}",
            if tag == TAG_NETWORK { "network" } else { "sampler" },
            bytes[5] as char
        )));
    }
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(Error::Integrity("checkpoint is truncated".into()));
    }
    let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(content).as_slice() != digest {
        return Err(Error::Integrity("checkpoint checksum mismatch".into()));
    }
    Ok(&content[HEADER_LEN..])
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    out
}

fn header(tag: u8) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.push(VERSION);
    out.push(tag);
    out
}

fn push_json(out: &mut Vec<u8>, json: &[u8]) -> Result<()> {
    let len = u32::try_from(json.len()).map_err(|_| Error::Usage("config too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(json);
    Ok(())
}

pub fn encode_network(net: &NetworkParams) -> Result<Vec<u8>> {
    let mut out = header(TAG_NETWORK);
    push_json(&mut out, &serde_json::to_vec(net.config())?)?;
    out.extend_from_slice(&net.step_count().to_le_bytes());
    out.extend_from_slice(&(net.values().len() as u64).to_le_bytes());
    for v in net.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(seal(out))
}

pub fn decode_network(bytes: &[u8]) -> Result<NetworkParams> {
    let body = open(bytes, TAG_NETWORK)?;
    let mut r = Reader { buf: body, pos: 0 };
    let clen = r.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(r.take(clen)?)
        .map_err(|e| Error::Integrity(format!("bad network config: {e}")))?;
    let step_count = r.u64()?;
    let n = r.len()?;
    if n != config.param_count() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {n} parameters, config implies {}",
            config.param_count()
        )));
    }
    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("length overflows".into()))?)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    r.done()?;
    NetworkParams::from_parts(config, values, step_count)
}

pub fn encode_sampler(sampler: &Sampler) -> Result<Vec<u8>> {
    let blobs = sampler
        .members()
        .iter()
        .map(encode_network)
        .collect::<Result<Vec<_>>>()?;
    let mut out = header(TAG_SAMPLER);
    push_json(&mut out, &serde_json::to_vec(sampler.config())?)?;
    out.extend_from_slice(&sampler.retrain_count().to_le_bytes());
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in &blobs {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    }
    for b in &blobs {
        out.extend_from_slice(b);
    }
    Ok(seal(out))
}

pub fn decode_sampler(bytes: &[u8]) -> Result<Sampler> {
    let body = open(bytes, TAG_SAMPLER)?;
    let mut r = Reader { buf: body, pos: 0 };
    let clen = r.u32()? as usize;
    let config: SamplerConfig = serde_json::from_slice(r.take(clen)?)
        .map_err(|e| Error::Integrity(format!("bad sampler config: {e}")))?;
    let retrains = r.u64()?;
    let m = r.u32()? as usize;
    let lens = (0..m).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let members = lens
        .into_iter()
        .map(|len| decode_network(r.take(len)?))
        .collect::<Result<Vec<_>>>()?;
    r.done()?;
    Ok(Sampler::from_parts(config, members)?.with_retrain_count(retrains))
}

pub fn save_checkpoint(sampler: &Sampler, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_sampler(sampler)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Sampler> {
    decode_sampler(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DropoutPlacement;
    use crate::posterior::{DataScheme, SamplerKind};

    fn sampler() -> Sampler {
        Sampler::build(SamplerConfig {
            kind: SamplerKind::Bootstrap,
            member_count: 3,
            data_scheme: DataScheme::BernoulliMask { p_keep: 0.5 },
            net: NetworkConfig {
                dropout_placement: DropoutPlacement::None,
                ..NetworkConfig::plain(5, vec![4, 3])
            },
            seed: 1,
            per_candidate_masks: true,
        })
        .unwrap()
    }

    #[test]
    fn network_round_trip() {
        let net = sampler().members()[1].clone();
        let back = decode_network(&encode_network(&net).unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn sampler_round_trip_and_file_io() {
        let s = sampler();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bsim");
        save_checkpoint(&s, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.config(), s.config());
        assert_eq!(back.members(), s.members());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_sampler(&sampler()).unwrap();
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x10;
        assert!(matches!(decode_sampler(&bad), Err(Error::Integrity(_))));
        assert!(matches!(decode_sampler(&bytes[..bytes.len() - 3]), Err(Error::Integrity(_))));
        let mut old = bytes.clone();
        old[4] = b'0';
        match decode_sampler(&old) {
            Err(Error::VersionMismatch { found, expected }) => {
                assert_eq!(found, "BSIM0");
                assert_eq!(expected, "BSIM1");
            }
            other => panic!("{other:?}"),
        }
        let net = encode_network(&sampler().members()[0]).unwrap();
        assert!(matches!(decode_sampler(&net), Err(Error::Integrity(_))));
    }
}
