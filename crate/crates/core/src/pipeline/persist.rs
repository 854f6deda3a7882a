//! Experience file format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "ONER"  u32 version
//! { u32 tag, u64 length, payload }*     tags: CONF PRMT IMGB PIXB [FEAT]
//! u32 crc32 of every preceding byte
//! ```
//!
//! `CONF` holds the engine configuration as JSON; all other payloads are
//! counts (`u32`) and `f32` values. Backbone weights are not stored: they are
//! regenerated from the configured seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::FeatureBundle;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prompt_bank::{PromptBank, PromptComponent};
use crate::prototypes::{ImagePrototypeBank, PixelPrototypeBank};
use crate::synthdata::SampleId;

use super::config::EngineConfig;
use super::engine::EngineState;

pub const MAGIC: [u8; 4] = *b"ONER";
pub const VERSION: u32 = 1;

const TAG_CONFIG: [u8; 4] = *b"CONF";
const TAG_PROMPTS: [u8; 4] = *b"PRMT";
const TAG_IMAGE_BANK: [u8; 4] = *b"IMGB";
const TAG_PIXEL_BANK: [u8; 4] = *b"PIXB";
const TAG_FEATURES: [u8; 4] = *b"FEAT";

const CHUNK_HEADER: usize = 12;

/// Precomputed features keyed by sample id, for scoring with an external backbone.
pub type FeatureStore = BTreeMap<SampleId, FeatureBundle>;

/// Everything an experience file carries.
#[derive(Clone, Debug)]
pub struct Experience {
    pub state: EngineState,
    pub features: Option<FeatureStore>,
}

/// Bytes one task adds to the two prototype banks: `(1 + N_s)·d` floats plus
/// one task id per bank.
pub fn prototype_bytes_per_task(dim: usize, per_task: usize) -> usize {
    (1 + per_task) * dim * 4 + 2 * 4
}

pub fn save_experience(state: &EngineState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_experience(state, None)?)
}

pub fn load_experience(path: &Path) -> Result<EngineState> {
    Ok(decode_experience(&fs::read(path)?)?.state)
}

pub fn load_experience_with_features(path: &Path) -> Result<Experience> {
    decode_experience(&fs::read(path)?)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_experience(state: &EngineState, features: Option<&FeatureStore>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);

    chunk(&mut out, TAG_CONFIG, &serde_json::to_vec(state.config())?);
    chunk(&mut out, TAG_PROMPTS, &encode_prompts(state.prompts())?);
    chunk(
        &mut out,
        TAG_IMAGE_BANK,
        &encode_image_bank(state.image_bank())?,
    );
    chunk(
        &mut out,
        TAG_PIXEL_BANK,
        &encode_pixel_bank(state.pixel_bank())?,
    );
    if let Some(f) = features {
        chunk(&mut out, TAG_FEATURES, &encode_features(f)?);
    }

    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn decode_experience(bytes: &[u8]) -> Result<Experience> {
    let mut r = Reader::new(bytes, 0);
    if r.take(4)? != MAGIC {
        return Err(Error::parse(0, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    if bytes.len() < 12 {
        return Err(Error::parse(
            bytes.len() as u64,
            "truncated: missing checksum",
        ));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(Error::parse(body_end as u64, "checksum mismatch"));
    }

    let mut r = Reader::new(&bytes[8..body_end], 8);
    let mut config = None;
    let mut prompts = None;
    let mut image_bank = None;
    let mut pixel_bank = None;
    let mut features = None;
    while !r.is_empty() {
        let at = r.offset();
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u64()?;
        let payload_at = r.offset();
        let mut p = Reader::new(r.take_len(len)?, payload_at);
        match tag {
            TAG_CONFIG => {
                let cfg: EngineConfig = serde_json::from_slice(p.rest())
                    .map_err(|e| Error::parse(payload_at, format!("config: {e}")))?;
                cfg.validate()
                    .map_err(|e| Error::parse(payload_at, format!("config: {e}")))?;
                set_once(&mut config, cfg, at, "CONF")?;
            }
            TAG_PROMPTS => set_once(&mut prompts, decode_prompts(&mut p)?, at, "PRMT")?,
            TAG_IMAGE_BANK => set_once(&mut image_bank, decode_image_bank(&mut p)?, at, "IMGB")?,
            TAG_PIXEL_BANK => set_once(&mut pixel_bank, decode_pixel_bank(&mut p)?, at, "PIXB")?,
            TAG_FEATURES => set_once(&mut features, decode_features(&mut p)?, at, "FEAT")?,
            other => {
                return Err(Error::parse(
                    at,
                    format!("unknown chunk tag {:?}", String::from_utf8_lossy(&other)),
                ))
            }
        }
        if !p.is_empty() {
            return Err(Error::parse(p.offset(), "trailing bytes inside chunk"));
        }
    }

    let end = body_end as u64;
    let missing = |name: &str| Error::parse(end, format!("missing {name} chunk"));
    let config = config.ok_or_else(|| missing("CONF"))?;
    let state = EngineState::from_parts(
        config,
        prompts.ok_or_else(|| missing("PRMT"))?,
        image_bank.ok_or_else(|| missing("IMGB"))?,
        pixel_bank.ok_or_else(|| missing("PIXB"))?,
    )
    .map_err(|e| Error::parse(end, e.to_string()))?;
    Ok(Experience { state, features })
}

fn set_once<T>(slot: &mut Option<T>, value: T, at: u64, name: &str) -> Result<()> {
    if slot.is_some() {
        return Err(Error::parse(at, format!("duplicate {name} chunk")));
    }
    *slot = Some(value);
    Ok(())
}

fn chunk(out: &mut Vec<u8>, tag: [u8; 4], payload: &[u8]) {
    out.reserve(CHUNK_HEADER + payload.len());
    out.extend_from_slice(&tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_count(out: &mut Vec<u8>, n: usize, what: &str) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::domain(format!("{what} count {n} exceeds u32")))?;
    put_u32(out, v);
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn encode_prompts(bank: &PromptBank) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_count(&mut out, bank.dim(), "dim")?;
    put_count(&mut out, bank.prompt_len(), "prompt_len")?;
    put_count(&mut out, bank.per_task(), "per_task")?;
    put_count(&mut out, bank.len(), "component")?;
    for c in bank.components() {
        put_u32(&mut out, c.owner_task);
        put_u32(&mut out, u32::from(c.frozen));
        put_f32s(&mut out, c.query.data());
        put_f32s(&mut out, c.key.data());
        put_f32s(&mut out, c.value.data());
    }
    Ok(out)
}

fn decode_prompts(r: &mut Reader<'_>) -> Result<PromptBank> {
    let start = r.offset();
    let dim = r.count()?;
    let prompt_len = r.count()?;
    let per_task = r.count()?;
    let n = r.count()?;
    let per_component = 8 + 4 * (2 * dim + prompt_len * dim);
    r.expect_remaining(n, per_component)?;
    let mut components = Vec::with_capacity(n);
    for _ in 0..n {
        let owner_task = r.u32()?;
        let flag_at = r.offset();
        let frozen = match r.u32()? {
            0 => false,
            1 => true,
            v => return Err(Error::parse(flag_at, format!("invalid freeze flag {v}"))),
        };
        let query =
            Tensor::vector(r.f32s(dim)?).map_err(|e| Error::parse(flag_at, e.to_string()))?;
        let key = Tensor::vector(r.f32s(dim)?).map_err(|e| Error::parse(flag_at, e.to_string()))?;
        let value = Tensor::matrix(prompt_len, dim, r.f32s(prompt_len * dim)?)
            .map_err(|e| Error::parse(flag_at, e.to_string()))?;
        components.push(PromptComponent {
            query,
            key,
            value,
            owner_task,
            frozen,
        });
    }
    PromptBank::from_components(per_task, dim, prompt_len, components)
        .map_err(|e| Error::parse(start, e.to_string()))
}

fn encode_image_bank(bank: &ImagePrototypeBank) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_count(&mut out, bank.dim(), "dim")?;
    put_count(&mut out, bank.len(), "prototype")?;
    for (task, p) in bank.entries() {
        put_u32(&mut out, *task);
        put_f32s(&mut out, p);
    }
    Ok(out)
}

fn decode_image_bank(r: &mut Reader<'_>) -> Result<ImagePrototypeBank> {
    let dim = r.count()?;
    let n = r.count()?;
    r.expect_remaining(n, 4 + 4 * dim)?;
    let mut bank = ImagePrototypeBank::new(dim);
    for _ in 0..n {
        let at = r.offset();
        let task = r.u32()?;
        let p = r.f32s(dim)?;
        bank.integrate(task, p)
            .map_err(|e| Error::parse(at, e.to_string()))?;
    }
    Ok(bank)
}

fn encode_pixel_bank(bank: &PixelPrototypeBank) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_count(&mut out, bank.dim(), "dim")?;
    put_count(&mut out, bank.per_task(), "per_task")?;
    put_count(&mut out, bank.len(), "task")?;
    for (task, p) in bank.entries() {
        put_u32(&mut out, *task);
        put_f32s(&mut out, p.data());
    }
    Ok(out)
}

fn decode_pixel_bank(r: &mut Reader<'_>) -> Result<PixelPrototypeBank> {
    let dim = r.count()?;
    let per_task = r.count()?;
    let n = r.count()?;
    r.expect_remaining(n, 4 + 4 * per_task * dim)?;
    let mut bank = PixelPrototypeBank::new(per_task, dim);
    for _ in 0..n {
        let at = r.offset();
        let task = r.u32()?;
        let rows = Tensor::matrix(per_task, dim, r.f32s(per_task * dim)?)
            .map_err(|e| Error::parse(at, e.to_string()))?;
        bank.integrate(task, rows)
            .map_err(|e| Error::parse(at, e.to_string()))?;
    }
    Ok(bank)
}

fn encode_features(store: &FeatureStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_count(&mut out, store.len(), "feature")?;
    for (id, f) in store {
        out.extend_from_slice(&id.key().to_le_bytes());
        put_count(&mut out, f.patches.rows(), "patch")?;
        put_count(&mut out, f.patches.cols(), "dim")?;
        put_f32s(&mut out, f.image.data());
        put_f32s(&mut out, f.patches.data());
    }
    Ok(out)
}

fn decode_features(r: &mut Reader<'_>) -> Result<FeatureStore> {
    let n = r.count()?;
    r.expect_remaining(n, 16)?;
    let mut store = FeatureStore::new();
    for _ in 0..n {
        let at = r.offset();
        let id = SampleId::from_key(r.u64()?);
        let rows = r.count()?;
        let dim = r.count()?;
        r.expect_remaining(1, 4 * dim * (1 + rows))?;
        let image =
            Tensor::matrix(1, dim, r.f32s(dim)?).map_err(|e| Error::parse(at, e.to_string()))?;
        let patches = Tensor::matrix(rows, dim, r.f32s(rows * dim)?)
            .map_err(|e| Error::parse(at, e.to_string()))?;
        if store.insert(id, FeatureBundle { image, patches }).is_some() {
            return Err(Error::parse(at, format!("duplicate features for {id}")));
        }
    }
    Ok(store)
}

/// Bounds-checked little-endian cursor that reports absolute file offsets.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], base: u64) -> Self {
        Self {
            bytes,
            pos: 0,
            base,
        }
    }

    fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::parse(
                self.offset(),
                format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_len(&mut self, len: u64) -> Result<&'a [u8]> {
        let n = usize::try_from(len)
            .ok()
            .filter(|&n| n <= self.remaining())
            .ok_or_else(|| {
                Error::parse(
                    self.offset(),
                    format!(
                        "chunk length {len} exceeds the {} bytes left",
                        self.remaining()
                    ),
                )
            })?;
        self.take(n)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    /// Fails before any allocation when `n` records of `size` bytes cannot fit.
    fn expect_remaining(&self, n: usize, size: usize) -> Result<()> {
        match n.checked_mul(size) {
            Some(total) if total <= self.remaining() => Ok(()),
            _ => Err(Error::parse(
                self.offset(),
                format!(
                    "declared {n} records of {size} bytes, only {} bytes left",
                    self.remaining()
                ),
            )),
        }
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let at = self.offset();
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::parse(at, "length overflow"))?,
        )?;
        let out: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::parse(at + 4 * i as u64, "non-finite value"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_state() -> EngineState {
        let mut cfg = EngineConfig::default();
        cfg.backbone.dim = 8;
        cfg.backbone.heads = 2;
        cfg.train.prototypes_per_task = Some(3);
        EngineState::new(cfg).unwrap()
    }

    #[test]
    fn empty_state_round_trips() {
        let s = small_state();
        let bytes = encode_experience(&s, None).unwrap();
        let back = decode_experience(&bytes).unwrap();
        assert_eq!(encode_experience(&back.state, None).unwrap(), bytes);
        assert!(back.features.is_none());
    }

    #[test]
    fn wrong_magic_is_named() {
        let mut bytes = encode_experience(&small_state(), None).unwrap();
        bytes[0] = b'X';
        let err = decode_experience(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn wrong_version_and_checksum() {
        let good = encode_experience(&small_state(), None).unwrap();
        let mut v = good.clone();
        v[4] = 9;
        assert!(matches!(
            decode_experience(&v),
            Err(Error::Parse { offset: 4, .. })
        ));
        let mut c = good.clone();
        let mid = c.len() / 2;
        c[mid] ^= 0xff;
        assert!(decode_experience(&c)
            .unwrap_err()
            .to_string()
            .contains("checksum"));
    }

    #[test]
    fn every_truncation_is_a_parse_error() {
        let good = encode_experience(&small_state(), None).unwrap();
        for n in 0..good.len() {
            match decode_experience(&good[..n]) {
                Err(Error::Parse { .. }) => {}
                other => panic!("length {n}: {other:?}"),
            }
        }
    }

    #[test]
    fn payload_arithmetic() {
        assert_eq!(prototype_bytes_per_task(32, 16), 17 * 32 * 4 + 8);
    }

    #[test]
    fn feature_chunk_round_trips() {
        let s = small_state();
        let mut store = FeatureStore::new();
        let id = SampleId {
            task: 1,
            split: crate::synthdata::Split::Test,
            index: 7,
        };
        store.insert(
            id,
            FeatureBundle {
                image: Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap(),
                patches: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            },
        );
        let bytes = encode_experience(&s, Some(&store)).unwrap();
        let back = decode_experience(&bytes).unwrap().features.unwrap();
        assert_eq!(back[&id].patches.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(back[&id].image.data(), &[0.6f32 as f64, 0.8f32 as f64]);
    }
}
