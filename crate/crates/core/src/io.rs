//! Little-endian binary containers for scenes, predictions and checkpoints.
//!
//! Scene: `"LISD"`, version `u16`, point count `u32`, channel count `u16`,
//! flags `u8` (bit 0 labels, bit 1 boxes), row-major `f32` points, then the
//! optional `u8` label block and box block (`u32` count, per box nine `f32`
//! followed by the class `u8`).

use std::fs;
use std::path::Path;

use crate::boxes::{wrap_yaw, Box9};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::{Model, Prediction};
use crate::params::ParamStore;
use crate::voxel::PointCloud;

pub const SCENE_MAGIC: &[u8; 4] = b"LISD";
pub const PREDICTION_MAGIC: &[u8; 4] = b"LSDP";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSDC";
pub const VERSION: u16 = 1;

const HAS_LABELS: u8 = 1;
const HAS_BOXES: u8 = 2;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(self.what, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(self.what, "count overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if &self.array::<4>()? != magic {
            return Err(Error::format(self.what, "bad magic"));
        }
        let v = self.u16()?;
        if v != VERSION {
            return Err(Error::format(self.what, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.what,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn count_u32(n: usize, what: &'static str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(what, format!("{n} entries do not fit u32")))
}

fn put_box(out: &mut Vec<u8>, b: &Box9) {
    put_f32s(
        out,
        b.center
            .iter()
            .chain(&b.size)
            .chain([&b.yaw])
            .chain(&b.velocity)
            .map(|&v| v as f32),
    );
    out.push(b.class);
}

fn get_box(r: &mut Reader) -> Result<Box9> {
    let v = r.f32s(9)?;
    let class = r.u8()?;
    let mut b = Box9::new(
        [v[0], v[1], v[2]].map(f64::from),
        [v[3], v[4], v[5]].map(f64::from),
        wrap_yaw(v[6] as f64),
        class,
    );
    b.velocity = [v[7] as f64, v[8] as f64];
    Ok(b)
}

pub fn encode_scene(pc: &PointCloud) -> Result<Vec<u8>> {
    pc.validate()?;
    let what = "scene file";
    let channels =
        u16::try_from(pc.channels()).map_err(|_| Error::format(what, "too many channels"))?;
    let mut out = Vec::with_capacity(16 + pc.points.as_slice().len() * 4);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count_u32(pc.len(), what)?.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    let mut flags = 0;
    if pc.labels.is_some() {
        flags |= HAS_LABELS;
    }
    if !pc.boxes.is_empty() {
        flags |= HAS_BOXES;
    }
    out.push(flags);
    put_f32s(&mut out, pc.points.as_slice().iter().copied());
    if let Some(l) = &pc.labels {
        out.extend_from_slice(l);
    }
    if !pc.boxes.is_empty() {
        out.extend_from_slice(&count_u32(pc.boxes.len(), what)?.to_le_bytes());
        for b in &pc.boxes {
            put_box(&mut out, b);
        }
    }
    Ok(out)
}

pub fn decode_scene(buf: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(buf, "scene file");
    r.header(SCENE_MAGIC)?;
    let n = r.u32()? as usize;
    let c = r.u16()? as usize;
    let flags = r.u8()?;
    if flags & !(HAS_LABELS | HAS_BOXES) != 0 {
        return Err(Error::format(
            "scene file",
            format!("unknown flags {flags:#04x}"),
        ));
    }
    let pts = r.f32s(
        n.checked_mul(c)
            .ok_or_else(|| Error::format("scene file", "count overflow"))?,
    )?;
    let mut pc = PointCloud::new(Mat::from_vec(n, c, pts)?)?;
    if flags & HAS_LABELS != 0 {
        pc.labels = Some(r.take(n)?.to_vec());
    }
    if flags & HAS_BOXES != 0 {
        let m = r.u32()? as usize;
        pc.boxes = (0..m).map(|_| get_box(&mut r)).collect::<Result<_>>()?;
    }
    r.finish()?;
    pc.validate()?;
    Ok(pc)
}

pub fn encode_prediction(p: &Prediction) -> Result<Vec<u8>> {
    let what = "predictions file";
    let mut out = Vec::new();
    out.extend_from_slice(PREDICTION_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count_u32(p.labels.len(), what)?.to_le_bytes());
    out.extend_from_slice(&p.labels);
    out.extend_from_slice(&count_u32(p.boxes.len(), what)?.to_le_bytes());
    for b in &p.boxes {
        put_box(&mut out, b);
        put_f32s(&mut out, [b.score as f32]);
    }
    Ok(out)
}

pub fn decode_prediction(buf: &[u8]) -> Result<Prediction> {
    let mut r = Reader::new(buf, "predictions file");
    r.header(PREDICTION_MAGIC)?;
    let n = r.u32()? as usize;
    let labels = r.take(n)?.to_vec();
    let m = r.u32()? as usize;
    let mut boxes = Vec::with_capacity(m.min(1 << 16));
    for _ in 0..m {
        let mut b = get_box(&mut r)?;
        b.score = r.f32()? as f64;
        boxes.push(b);
    }
    r.finish()?;
    Ok(Prediction { labels, boxes })
}

/// Header (magic, version, config hash, config text) followed by named
/// tensors with `u32` rows and cols and an `f32` payload.
pub fn encode_checkpoint(model: &Model<f32>) -> Result<Vec<u8>> {
    let what = "checkpoint";
    let text = model.config.to_toml();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.config.hash());
    out.extend_from_slice(&count_u32(text.len(), what)?.to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let p = &model.params;
    out.extend_from_slice(&count_u32(p.len(), what)?.to_le_bytes());
    for (name, m) in p.names().iter().zip(p.values()) {
        let len =
            u16::try_from(name.len()).map_err(|_| Error::format(what, "tensor name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&count_u32(m.rows(), what)?.to_le_bytes());
        out.extend_from_slice(&count_u32(m.cols(), what)?.to_le_bytes());
        put_f32s(&mut out, m.as_slice().iter().copied());
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Model<f32>> {
    let what = "checkpoint";
    let mut r = Reader::new(buf, what);
    r.header(CHECKPOINT_MAGIC)?;
    let hash: [u8; 32] = r.array()?;
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::format(what, "config is not UTF-8"))?;
    let config = RunConfig::from_toml(text)?;
    if config.hash() != hash {
        return Err(Error::ConfigMismatch);
    }
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format(what, "tensor name is not UTF-8"))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let vals = r.f32s(
            rows.checked_mul(cols)
                .ok_or_else(|| Error::format(what, "count overflow"))?,
        )?;
        params.insert(&name, Mat::from_vec(rows, cols, vals)?, false)?;
    }
    r.finish()?;
    Model::from_parts(config, params)
}

pub fn read_file<T>(path: &Path, decode: impl FnOnce(&[u8]) -> Result<T>) -> Result<T> {
    let buf = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode(&buf).map_err(|e| e.in_file(path))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneSpec};

    #[test]
    fn scene_round_trip() {
        let pc = generate_scene(2, &SceneSpec::default().scaled(0.1)).unwrap();
        let bytes = encode_scene(&pc).unwrap();
        let back = decode_scene(&bytes).unwrap();
        assert_eq!(back.points, pc.points);
        assert_eq!(back.labels, pc.labels);
        assert_eq!(back.boxes.len(), pc.boxes.len());
        assert_eq!(encode_scene(&back).unwrap(), bytes);
    }

    #[test]
    fn scene_layout_and_errors() {
        let pc = PointCloud::new(Mat::from_vec(1, 3, vec![1.0f32, 2.0, 3.0]).unwrap()).unwrap();
        let bytes = encode_scene(&pc).unwrap();
        assert_eq!(&bytes[..4], b"LISD");
        assert_eq!(bytes.len(), 4 + 2 + 4 + 2 + 1 + 12);
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_scene(&extra), Err(Error::Format { .. })));
        assert!(matches!(
            decode_scene(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode_scene(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn prediction_round_trip() {
        let p = Prediction {
            labels: vec![1, 2, 3],
            boxes: vec![Box9::new([1.0, 2.0, 0.5], [4.0, 2.0, 1.5], 0.25, 3).with_score(0.75)],
        };
        let bytes = encode_prediction(&p).unwrap();
        assert_eq!(decode_prediction(&bytes).unwrap(), p);
    }

    #[test]
    fn checkpoint_round_trip_and_hash() {
        let m = Model::<f32>::new(RunConfig::default()).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), m);
        let mut bad = bytes;
        bad[6] ^= 1;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::ConfigMismatch)
        ));
    }
}
