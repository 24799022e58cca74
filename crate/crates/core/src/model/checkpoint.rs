//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      b"FSEG"
//! version    u32 = 1
//! config     stages u32, convs_per_stage u32 × stages, channels_per_stage u32 × stages,
//!            in_channels u32, out_channels u32, bn_momentum f64, bn_epsilon f64
//! count      u32 number of tensors
//! tensor     name_len u16, UTF-8 name, rank u8, dims u32 × rank, data f64 × product(dims)
//! ```
//!
//! Parameter tensors come first in [`Network::named_tensors`] order (running
//! statistics included), followed by the metadata tensors `meta/epoch` and
//! `meta/val_loss_class_0` .. `meta/val_loss_class_6`, each of shape `[1]`.

use std::path::Path;

use super::{NetConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

const MAGIC: &[u8; 4] = b"FSEG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub per_class_val_loss: [f64; NUM_CLASSES],
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self { epoch: 0, per_class_val_loss: [f64::NAN; NUM_CLASSES] }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: CheckpointMeta,
}

pub fn encode_checkpoint(net: &Network, meta: &CheckpointMeta) -> Vec<u8> {
    let cfg = net.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.stages() as u32).to_le_bytes());
    for &c in cfg.convs_per_stage.iter().chain(&cfg.channels_per_stage) {
        buf.extend_from_slice(&(c as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(cfg.in_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.out_channels as u32).to_le_bytes());
    buf.extend_from_slice(&cfg.bn_momentum.to_le_bytes());
    buf.extend_from_slice(&cfg.bn_epsilon.to_le_bytes());

    let tensors = net.named_tensors(true);
    let epoch = Tensor::new(&[1], meta.epoch as f64).expect("valid shape");
    let losses: Vec<Tensor> =
        meta.per_class_val_loss.iter().map(|&l| Tensor::new(&[1], l).expect("valid shape")).collect();
    let loss_names: Vec<String> = (0..NUM_CLASSES).map(|c| format!("meta/val_loss_class_{c}")).collect();
    let mut all: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    all.push(("meta/epoch", &epoch));
    all.extend(loss_names.iter().map(String::as_str).zip(losses.iter()));

    buf.extend_from_slice(&(all.len() as u32).to_le_bytes());
    for (name, t) in all {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(net, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated: need {n} bytes for {what}, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn err(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Format { offset: at, msg: msg.into() }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err(0, "bad magic, expected FSEG"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported version {version}")));
    }
    let stages_at = r.pos;
    let stages = r.u32("stage count")? as usize;
    // each stage needs 8 bytes of config; reject absurd counts before allocating
    if stages > (bytes.len() - r.pos) / 8 {
        return Err(r.err(stages_at, format!("stage count {stages} exceeds file size")));
    }
    let mut convs = Vec::with_capacity(stages);
    for _ in 0..stages {
        convs.push(r.u32("convs_per_stage")? as usize);
    }
    let mut chans = Vec::with_capacity(stages);
    for _ in 0..stages {
        chans.push(r.u32("channels_per_stage")? as usize);
    }
    let cfg_end_start = r.pos;
    let cfg = NetConfig {
        convs_per_stage: convs,
        channels_per_stage: chans,
        in_channels: r.u32("in_channels")? as usize,
        out_channels: r.u32("out_channels")? as usize,
        bn_momentum: r.f64("bn_momentum")?,
        bn_epsilon: r.f64("bn_epsilon")?,
    };
    let mut net = Network::zeros(&cfg).map_err(|e| r.err(cfg_end_start, format!("invalid config block: {e}")))?;
    let expected: Vec<String> = net.named_tensors(true).into_iter().map(|(n, _)| n).collect();

    let count_at = r.pos;
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() + 1 + NUM_CLASSES {
        return Err(r.err(count_at, format!("tensor count {count}, expected {}", expected.len() + 1 + NUM_CLASSES)));
    }
    let mut meta = CheckpointMeta::default();
    for i in 0..count {
        let at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| r.err(at + 2, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let len: usize = dims.iter().product();
        if rank == 0 || len == 0 || len > (bytes.len() - r.pos) / 8 {
            return Err(r.err(at, format!("tensor {name}: bad or truncated dims {dims:?}")));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64("tensor data")?);
        }
        let t = Tensor::from_vec(&dims, data).map_err(|e| r.err(at, e.to_string()))?;
        let want = expected.get(i).map(String::as_str);
        if i < expected.len() {
            if want != Some(name.as_str()) {
                return Err(r.err(at, format!("tensor #{i} is {name:?}, expected {:?}", want.unwrap())));
            }
            net.set_tensor(&name, t).map_err(|e| r.err(at, e.to_string()))?;
        } else if name == "meta/epoch" && i == expected.len() {
            meta.epoch = scalar(&t).map_err(|m| r.err(at, m))? as usize;
        } else if let Some(c) = name.strip_prefix("meta/val_loss_class_").and_then(|s| s.parse::<usize>().ok()) {
            if c != i - expected.len() - 1 {
                return Err(r.err(at, format!("unexpected metadata tensor {name}")));
            }
            meta.per_class_val_loss[c] = scalar(&t).map_err(|m| r.err(at, m))?;
        } else {
            return Err(r.err(at, format!("unexpected tensor {name:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { network: net, meta })
}

fn scalar(t: &Tensor) -> std::result::Result<f64, String> {
    if t.shape() != [1] {
        return Err(format!("metadata tensor has shape {:?}, expected [1]", t.shape()));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::tensor::Prng;

    fn trained_net() -> Network {
        let mut net = Network::build(&NetConfig::desk(), &mut Prng::new(21)).unwrap();
        let x = Prng::new(22).normal_tensor(&[2, 3, 8, 8], 0.3, 1.0).unwrap();
        net.forward(&x, Mode::Train).unwrap();
        net
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta { epoch: 17, per_class_val_loss: [0.1, 0.2, 1.0 / 3.0, 0.4, 0.5, 0.6, 1e-300] }
    }

    #[test]
    fn round_trip_bytes_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let net = trained_net();
        let p1 = dir.path().join("a.fseg");
        save_checkpoint(&net, &meta(), &p1).unwrap();
        let ck = load_checkpoint(&p1).unwrap();
        assert_eq!(ck.network, net);
        assert_eq!(ck.meta, meta());
        let p2 = dir.path().join("b.fseg");
        save_checkpoint(&ck.network, &ck.meta, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&Network::zeros(&NetConfig::desk()).unwrap(), &meta());
        assert_eq!(&bytes[..4], b"FSEG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        let words: Vec<u32> = bytes[12..36].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(words, vec![2, 2, 8, 16, 3, 7]);
        assert_eq!(f64::from_le_bytes(bytes[36..44].try_into().unwrap()), 0.1);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_checkpoint(&trained_net(), &meta());
        for cut in [0, 3, 7, 20, 100, bytes.len() / 2, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_checkpoint(&trained_net(), &meta());
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
        bytes[0] = b'F';
        bytes[4] = 2;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_checkpoint(&trained_net(), &meta());
        let n = bytes.len();
        bytes.push(0);
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset, .. }) if offset == n));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_checkpoint("/nonexistent/x.fseg"), Err(Error::Io { .. })));
    }
}
