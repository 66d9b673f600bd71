//! Versioned binary checkpoints: magic "MOOR", little-endian lengths,
//! a config snapshot, named float64 tensors, optimizer state, RNG state,
//! and a trailing CRC32 over everything before it.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::numkit::{AdamSlot, Tensor};

use super::ExpError;

const MAGIC: &[u8; 4] = b"MOOR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub name: String,
    pub t: u64,
    pub slots: Vec<AdamSlot>,
}

/// Everything needed to resume or analyze a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config_json: String,
    pub step: u64,
    pub rngs: Vec<(String, RngState)>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizers: Vec<OptimizerState>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Copies stored values into live parameters by name, insisting on
    /// matching shapes.
    pub fn load_into(&self, named: &[(String, Tensor)]) -> Result<(), ExpError> {
        for (name, tensor) in named {
            let Some((shape, data)) = self.tensor(name) else {
                return Err(ExpError::Checkpoint(format!(
                    "checkpoint is missing tensor {name:?}"
                )));
            };
            if shape != tensor.shape() {
                return Err(ExpError::Checkpoint(format!(
                    "tensor {name:?} has shape {:?} in the checkpoint but {:?} in the model",
                    shape,
                    tensor.shape()
                )));
            }
            tensor.set_data(data);
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
    fn floats(&mut self, fs: &[f64]) {
        self.u64(fs.len() as u64);
        for f in fs {
            self.buf.extend_from_slice(&f.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ExpError> {
        if self.pos + n > self.buf.len() {
            return Err(ExpError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, ExpError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ExpError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, ExpError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8], ExpError> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn floats(&mut self) -> Result<Vec<f64>, ExpError> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(ck.version);
    w.bytes(ck.config_json.as_bytes());
    w.u64(ck.step);
    w.u64(ck.rngs.len() as u64);
    for (name, rng) in &ck.rngs {
        w.bytes(name.as_bytes());
        w.buf.extend_from_slice(&rng.seed);
        w.u128(rng.word_pos);
        w.u64(rng.stream);
    }
    w.u64(ck.tensors.len() as u64);
    for (name, shape, data) in &ck.tensors {
        w.bytes(name.as_bytes());
        w.u64(shape.len() as u64);
        for &d in shape {
            w.u64(d as u64);
        }
        w.floats(data);
    }
    w.u64(ck.optimizers.len() as u64);
    for opt in &ck.optimizers {
        w.bytes(opt.name.as_bytes());
        w.u64(opt.t);
        w.u64(opt.slots.len() as u64);
        for slot in &opt.slots {
            w.floats(&slot.m);
            w.floats(&slot.v);
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, ExpError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(ExpError::Checkpoint("bad magic bytes".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(ExpError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ExpError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_json = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| ExpError::Checkpoint("config snapshot is not utf-8".into()))?;
    let step = r.u64()?;
    let n_rngs = r.u64()? as usize;
    let mut rngs = Vec::with_capacity(n_rngs);
    for _ in 0..n_rngs {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| ExpError::Checkpoint("rng name is not utf-8".into()))?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let word_pos = r.u128()?;
        let stream = r.u64()?;
        rngs.push((
            name,
            RngState {
                seed,
                word_pos,
                stream,
            },
        ));
    }
    let n_tensors = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| ExpError::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let data = r.floats()?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(ExpError::Checkpoint(format!(
                "tensor {name:?} payload does not match its dims"
            )));
        }
        tensors.push((name, shape, data));
    }
    let n_opts = r.u64()? as usize;
    let mut optimizers = Vec::with_capacity(n_opts);
    for _ in 0..n_opts {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| ExpError::Checkpoint("optimizer name is not utf-8".into()))?;
        let t = r.u64()?;
        let n_slots = r.u64()? as usize;
        let mut slots = Vec::with_capacity(n_slots);
        for _ in 0..n_slots {
            let m = r.floats()?;
            let v = r.floats()?;
            slots.push(AdamSlot { m, v });
        }
        optimizers.push(OptimizerState { name, t, slots });
    }
    if r.pos != body.len() {
        return Err(ExpError::Checkpoint("trailing bytes in checkpoint".into()));
    }
    Ok(Checkpoint {
        version,
        config_json,
        step,
        rngs,
        tensors,
        optimizers,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), ExpError> {
    std::fs::write(path, encode(ck)).map_err(|e| ExpError::Io(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ExpError> {
    let bytes = std::fs::read(path).map_err(|e| ExpError::Io(e.to_string()))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let _: u64 = rng.random();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_json: "{\"k\":2}".into(),
            step: 12345,
            rngs: vec![("collect".into(), RngState::capture(&rng))],
            tensors: vec![
                ("a.w".into(), vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-9, 7.0]),
                ("b".into(), vec![1], vec![42.0]),
            ],
            optimizers: vec![OptimizerState {
                name: "policy".into(),
                t: 9,
                slots: vec![AdamSlot {
                    m: vec![0.1; 6],
                    v: vec![0.2; 6],
                }],
            }],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = encode(&ck);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.config_json, ck.config_json);
        assert_eq!(back.step, ck.step);
        assert_eq!(back.rngs, ck.rngs);
        assert_eq!(back.tensors, ck.tensors);
        assert_eq!(back.optimizers, ck.optimizers);
    }

    #[test]
    fn rng_state_round_trip_continues_identically() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let _: [u64; 3] = rng.random();
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        let a: [u64; 4] = rng.random();
        let b: [u64; 4] = restored.random();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode(&sample());
        for cut in [bytes.len() - 1, bytes.len() / 2, 6] {
            assert!(decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(decode(&bytes), Err(ExpError::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let mut ck = sample();
        ck.version = 99;
        let bytes = encode(&ck);
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let ck = sample();
        let t = Tensor::param(&[3, 2], vec![0.0; 6]).unwrap();
        let err = ck.load_into(&[("a.w".into(), t)]).unwrap_err();
        assert!(err.to_string().contains("a.w"), "{err}");
    }
}
