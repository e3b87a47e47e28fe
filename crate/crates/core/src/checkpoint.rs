//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `BTFLCKPT`, a little-endian `u32` format
//! version, a `u32` section count, then sections of
//! `[tag: 4 bytes][len: u64][payload][crc32(payload): u32]`. All numbers are
//! little-endian and floats are stored as raw IEEE-754 bits, so a round trip
//! is bit-identical. Sections: `HYPR` (hyperparameters), `MOD1`..`MOD3`
//! (per-mode features, scaler, design, Gram matrix and q-factors) and `CORE`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::state::{
    CoreState, Decomposition, GammaQ, GaussianColumnQ, GaussianEntryQ, Hyperparams, ModeHyper,
    ModeState, ModelState, Standardizer,
};
use crate::tensor::{FeatureMatrix, Matrix, Tensor3};

pub const MAGIC: &[u8; 8] = b"BTFLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn strs(&mut self, v: &[String]) {
        self.usize(v.len());
        v.iter().for_each(|s| self.str(s));
    }
    fn matrix(&mut self, m: &Matrix) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        m.as_slice().iter().for_each(|&x| self.f64(x));
    }
    fn tensor(&mut self, t: &Tensor3) {
        t.dims().iter().for_each(|&d| self.usize(d));
        t.as_slice().iter().for_each(|&x| self.f64(x));
    }
    fn gamma(&mut self, g: &GammaQ) {
        self.usize(g.rows);
        self.usize(g.cols);
        self.f64s(&g.shape);
        self.f64s(&g.scale);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("section {} ends early", self.section)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Checkpoint(format!("bad flag {v} in section {}", self.section))),
        }
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        // Any count larger than the remaining bytes is corrupt.
        if v > self.buf.len() as u64 * 8 + 64 {
            return Err(Error::Checkpoint(format!("implausible size {v} in section {}", self.section)));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("invalid text in section {}", self.section)))
    }
    fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.usize()?;
        (0..n).map(|_| self.str()).collect()
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let (r, c) = (self.usize()?, self.usize()?);
        let data = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_vec(r, c, data))
    }
    fn tensor(&mut self) -> Result<Tensor3> {
        let dims = [self.usize()?, self.usize()?, self.usize()?];
        let data = (0..dims.iter().product::<usize>())
            .map(|_| self.f64())
            .collect::<Result<Vec<_>>>()?;
        Tensor3::from_vec(dims, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn gamma(&mut self) -> Result<GammaQ> {
        Ok(GammaQ {
            rows: self.usize()?,
            cols: self.usize()?,
            shape: self.f64s()?,
            scale: self.f64s()?,
        })
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("trailing bytes in section {}", self.section)));
        }
        Ok(())
    }
}

fn write_hyper(w: &mut Writer, h: &Hyperparams) {
    w.f64(h.sigma2_y);
    for m in &h.modes {
        w.f64(m.sigma2);
        w.f64(m.alpha);
        w.f64(m.beta);
        w.usize(m.latent_dim);
        w.bool(m.ones_column);
        w.bool(m.bias_column);
    }
    w.f64(h.core_alpha);
    w.f64(h.core_beta);
    w.bool(h.core_prior);
    w.u8(match h.decomposition {
        Decomposition::Tucker => 0,
        Decomposition::Cp => 1,
    });
    w.bool(h.row_shared_precision);
    w.bool(h.standardize_features);
    w.u64(h.seed);
}

fn read_hyper(r: &mut Reader) -> Result<Hyperparams> {
    let sigma2_y = r.f64()?;
    let mut modes = Vec::with_capacity(3);
    for _ in 0..3 {
        modes.push(ModeHyper {
            sigma2: r.f64()?,
            alpha: r.f64()?,
            beta: r.f64()?,
            latent_dim: r.usize()?,
            ones_column: r.bool()?,
            bias_column: r.bool()?,
        });
    }
    Ok(Hyperparams {
        sigma2_y,
        modes: modes.try_into().expect("three modes"),
        core_alpha: r.f64()?,
        core_beta: r.f64()?,
        core_prior: r.bool()?,
        decomposition: match r.u8()? {
            0 => Decomposition::Tucker,
            1 => Decomposition::Cp,
            v => return Err(Error::Checkpoint(format!("unknown decomposition tag {v}"))),
        },
        row_shared_precision: r.bool()?,
        standardize_features: r.bool()?,
        seed: r.u64()?,
    })
}

fn write_mode(w: &mut Writer, m: &ModeState) {
    w.matrix(&m.features.values);
    w.strs(&m.features.row_ids);
    w.strs(&m.features.col_ids);
    w.f64s(&m.scaler.mean);
    w.f64s(&m.scaler.sd);
    w.matrix(&m.design);
    w.matrix(&m.gram);
    w.gamma(&m.lambda);
    w.usize(m.proj.len());
    for c in &m.proj {
        w.f64s(c.mean.as_slice());
        w.matrix(&c.cov);
    }
    w.matrix(&m.latent.mean);
    w.matrix(&m.latent.var);
    w.usize(m.offset);
}

fn read_mode(r: &mut Reader) -> Result<ModeState> {
    let values = r.matrix()?;
    let row_ids = r.strs()?;
    let col_ids = r.strs()?;
    let features =
        FeatureMatrix::new(values, row_ids, col_ids).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let scaler = Standardizer {
        mean: r.f64s()?,
        sd: r.f64s()?,
    };
    let design = r.matrix()?;
    let gram = r.matrix()?;
    let lambda = r.gamma()?;
    let n = r.usize()?;
    let mut proj = Vec::with_capacity(n);
    for _ in 0..n {
        let mean = DVector::from_vec(r.f64s()?);
        let cov = r.matrix()?;
        proj.push(GaussianColumnQ { mean, cov });
    }
    let latent = GaussianEntryQ {
        mean: r.matrix()?,
        var: r.matrix()?,
    };
    Ok(ModeState {
        features,
        scaler,
        design,
        gram,
        lambda,
        proj,
        latent,
        offset: r.usize()?,
    })
}

fn write_core(w: &mut Writer, c: &CoreState) {
    w.tensor(&c.mean);
    w.tensor(&c.var);
    w.gamma(&c.lambda);
    w.usize(c.free.len());
    c.free.iter().for_each(|&f| w.usize(f));
}

fn read_core(r: &mut Reader) -> Result<CoreState> {
    let mean = r.tensor()?;
    let var = r.tensor()?;
    let lambda = r.gamma()?;
    let n = r.usize()?;
    let free = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    Ok(CoreState {
        mean,
        var,
        lambda,
        free,
    })
}

const TAGS: [&[u8; 4]; 5] = [b"HYPR", b"MOD1", b"MOD2", b"MOD3", b"CORE"];

/// Serializes the whole state.
pub fn encode(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(TAGS.len() as u32).to_le_bytes());
    for (s, tag) in TAGS.iter().enumerate() {
        let mut w = Writer::default();
        match s {
            0 => write_hyper(&mut w, &state.hyper),
            1..=3 => write_mode(&mut w, &state.modes[s - 1]),
            _ => write_core(&mut w, &state.core),
        }
        out.extend_from_slice(*tag);
        out.extend_from_slice(&(w.buf.len() as u64).to_le_bytes());
        out.extend_from_slice(&w.buf);
        out.extend_from_slice(&crc32fast::hash(&w.buf).to_le_bytes());
    }
    out
}

/// Parses and validates a checkpoint; nothing is returned unless every
/// section is present and passes its checksum.
pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    let short = || Error::Checkpoint("file is truncated".into());
    if bytes.len() < 16 {
        return Err(short());
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if count != TAGS.len() {
        return Err(Error::Checkpoint(format!("expected {} sections, found {count}", TAGS.len())));
    }
    let mut pos = 16;
    let mut payloads: Vec<&[u8]> = Vec::with_capacity(count);
    for tag in TAGS {
        if bytes.len() < pos + 12 {
            return Err(short());
        }
        if &bytes[pos..pos + 4] != tag {
            return Err(Error::Checkpoint(format!(
                "expected section {}",
                String::from_utf8_lossy(tag)
            )));
        }
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes"));
        pos += 12;
        if ((bytes.len() - pos) as u64) < len.saturating_add(4) {
            return Err(short());
        }
        let len = len as usize;
        let payload = &bytes[pos..pos + len];
        let crc = u32::from_le_bytes(bytes[pos + len..pos + len + 4].try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch in section {}",
                String::from_utf8_lossy(tag)
            )));
        }
        payloads.push(payload);
        pos += len + 4;
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last section".into()));
    }
    let reader = |s: usize| Reader {
        buf: payloads[s],
        pos: 0,
        section: ["HYPR", "MOD1", "MOD2", "MOD3", "CORE"][s],
    };
    let mut r = reader(0);
    let hyper = read_hyper(&mut r)?;
    r.finish()?;
    let mut modes = Vec::with_capacity(3);
    for s in 1..=3 {
        let mut r = reader(s);
        modes.push(read_mode(&mut r)?);
        r.finish()?;
    }
    let mut r = reader(4);
    let core = read_core(&mut r)?;
    r.finish()?;
    Ok(ModelState {
        hyper,
        modes: modes.try_into().expect("three modes"),
        core,
    })
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    write_atomic(path, &encode(state))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{tiny_data, tiny_features};
    use crate::vb::{train, TrainConfig};

    fn fresh() -> ModelState {
        let mut hyper = Hyperparams::tucker([2, 3, 1], 1e-5, 1e5).with_seed(77);
        hyper.modes[2].bias_column = true;
        hyper.row_shared_precision = true;
        ModelState::init_random(hyper, tiny_features(77, [3, 4, 2], [5, 3, 4])).unwrap()
    }

    #[test]
    fn fresh_state_round_trips() {
        let s = fresh();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back), encode(&s));
    }

    #[test]
    fn trained_state_round_trips_through_a_file() {
        let mut s = fresh();
        let (y, mask) = tiny_data(1, [3, 4, 2], 0.1);
        train(&mut s, &y, &mask, &TrainConfig::with_sweeps(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1, "no temp file left");
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = encode(&fresh());
        for cut in [0, 10, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        let err = decode(&flipped).unwrap_err().to_string();
        assert!(err.contains("checksum") || err.contains("section"), "{err}");
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&fresh());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 7, expected: 1 })));
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }
}
