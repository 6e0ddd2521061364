//! Precomputed ITC vectors of a corpus and the `RAMMIDX1` file format.
//!
//! Layout (little-endian): magic(8) | version u16 | d_proj u16 | count u64 |
//! fingerprint u64 | count × (pair_id u64, source_tag u8, caption_offset u64)
//! | count × d_proj f32 text vectors | count × d_proj f32 image vectors.
//! Captions live in a sidecar next to the index: UTF-8, one per line,
//! addressed by byte offset.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RammError, Result};
use crate::exec::Exec;
use crate::model::params::Params;
use crate::model::{PatchGrid, RammModel, Vocab};
use crate::tensor::{Real, Tensor};

pub const INDEX_MAGIC: &[u8; 8] = b"RAMMIDX1";
pub const INDEX_VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 2 + 8 + 8;
const RECORD_LEN: usize = 8 + 1 + 8;
const NORM_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceTag {
    #[serde(rename = "PMCPM")]
    Pmcpm,
    #[serde(rename = "ROCO")]
    Roco,
    #[serde(rename = "MIMIC_CXR")]
    MimicCxr,
    #[serde(rename = "SYNTH")]
    Synth,
    #[serde(rename = "OTHER")]
    Other,
}

impl SourceTag {
    pub const ALL: [SourceTag; 5] = [
        SourceTag::Pmcpm,
        SourceTag::Roco,
        SourceTag::MimicCxr,
        SourceTag::Synth,
        SourceTag::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Pmcpm => "PMCPM",
            SourceTag::Roco => "ROCO",
            SourceTag::MimicCxr => "MIMIC_CXR",
            SourceTag::Synth => "SYNTH",
            SourceTag::Other => "OTHER",
        }
    }

    pub fn to_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        SourceTag::ALL.get(b as usize).copied()
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceTag {
    type Err = RammError;

    fn from_str(s: &str) -> Result<Self> {
        SourceTag::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| RammError::Config(format!("unknown source tag `{s}`")))
    }
}

/// One corpus pair as seen by the store builder. `image` is `Err` when the
/// payload could not be decoded.
#[derive(Clone, Debug)]
pub struct StoreItem {
    pub pair_id: u64,
    pub source_tag: SourceTag,
    pub caption: String,
    pub image: std::result::Result<Tensor<f32>, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord<'a> {
    pub pair_id: u64,
    pub source_tag: SourceTag,
    pub caption_offset: u64,
    pub text_vec: &'a [f32],
    pub image_vec: &'a [f32],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildReport {
    pub encoded: usize,
    pub skipped: Vec<(u64, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    d_proj: usize,
    fingerprint: u64,
    ids: Vec<u64>,
    tags: Vec<SourceTag>,
    caption_offsets: Vec<u64>,
    text_vecs: Vec<f32>,
    image_vecs: Vec<f32>,
    captions: String,
    rows: HashMap<u64, usize>,
}

/// Hash of the uni-modal encoders, the projection heads and `d_proj`: the
/// identity of the frozen encoders an index was built with.
pub fn fingerprint<T: Real>(model: &RammModel<T>) -> u64 {
    let mut h = Sha256::new();
    let d_proj = model.text_proj.lin.w.cols() as u16;
    let mut feed = |_: String, t: &Tensor<T>| {
        for &v in t.data() {
            h.update(v.to_f64_lossless().to_bits().to_le_bytes());
        }
    };
    model.text.visit("text", &mut feed);
    model.image.visit("image", &mut feed);
    model.text_proj.visit("text_proj", &mut feed);
    model.image_proj.visit("image_proj", &mut feed);
    h.update(d_proj.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

fn check_unit(v: &[f32], what: &str) -> Result<()> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if (n - 1.0).abs() > NORM_TOL {
        return Err(RammError::Contract(format!("{what} vector has norm {n}, expected 1")));
    }
    Ok(())
}

impl EmbeddingIndex {
    pub fn empty(d_proj: usize, fingerprint: u64) -> Self {
        EmbeddingIndex {
            d_proj,
            fingerprint,
            ids: Vec::new(),
            tags: Vec::new(),
            caption_offsets: Vec::new(),
            text_vecs: Vec::new(),
            image_vecs: Vec::new(),
            captions: String::new(),
            rows: HashMap::new(),
        }
    }

    /// Append one record; captions must not contain newlines.
    pub fn push(&mut self, pair_id: u64, tag: SourceTag, caption: &str, text_vec: &[f32], image_vec: &[f32]) -> Result<()> {
        if text_vec.len() != self.d_proj || image_vec.len() != self.d_proj {
            return Err(RammError::Dimension {
                op: "index push",
                lhs: vec![text_vec.len(), image_vec.len()],
                rhs: vec![self.d_proj],
            });
        }
        if self.rows.contains_key(&pair_id) {
            return Err(RammError::DuplicatePairId(pair_id));
        }
        check_unit(text_vec, "text")?;
        check_unit(image_vec, "image")?;
        self.rows.insert(pair_id, self.ids.len());
        self.ids.push(pair_id);
        self.tags.push(tag);
        self.caption_offsets.push(self.captions.len() as u64);
        self.captions.push_str(&caption.replace(['\n', '\r'], " "));
        self.captions.push('\n');
        self.text_vecs.extend_from_slice(text_vec);
        self.image_vecs.extend_from_slice(image_vec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn d_proj(&self) -> usize {
        self.d_proj
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn pair_id(&self, row: usize) -> u64 {
        self.ids[row]
    }

    pub fn pair_ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn source_tag(&self, row: usize) -> SourceTag {
        self.tags[row]
    }

    pub fn row_of(&self, pair_id: u64) -> Option<usize> {
        self.rows.get(&pair_id).copied()
    }

    pub fn text_vec(&self, row: usize) -> &[f32] {
        &self.text_vecs[row * self.d_proj..(row + 1) * self.d_proj]
    }

    pub fn image_vec(&self, row: usize) -> &[f32] {
        &self.image_vecs[row * self.d_proj..(row + 1) * self.d_proj]
    }

    /// All vectors of one family as a flat `len × d_proj` array.
    pub fn vectors(&self, text: bool) -> &[f32] {
        if text {
            &self.text_vecs
        } else {
            &self.image_vecs
        }
    }

    pub fn record(&self, row: usize) -> EmbeddingRecord<'_> {
        EmbeddingRecord {
            pair_id: self.ids[row],
            source_tag: self.tags[row],
            caption_offset: self.caption_offsets[row],
            text_vec: self.text_vec(row),
            image_vec: self.image_vec(row),
        }
    }

    pub fn caption(&self, row: usize) -> &str {
        let start = self.caption_offsets[row] as usize;
        let rest = &self.captions[start..];
        &rest[..rest.find('\n').unwrap_or(rest.len())]
    }

    /// Refuse to serve a model whose projection heads differ from the builder's.
    pub fn check_fingerprint(&self, expected: u64) -> Result<()> {
        if self.fingerprint != expected {
            return Err(RammError::FingerprintMismatch {
                expected,
                found: self.fingerprint,
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(HEADER_LEN + n * RECORD_LEN + 8 * n * self.d_proj);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_proj as u16).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        for i in 0..n {
            out.extend_from_slice(&self.ids[i].to_le_bytes());
            out.push(self.tags[i].to_byte());
            out.extend_from_slice(&self.caption_offsets[i].to_le_bytes());
        }
        for v in self.text_vecs.iter().chain(&self.image_vecs) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse index bytes together with the caption sidecar contents.
    pub fn decode(bytes: &[u8], captions: String) -> Result<Self> {
        let truncated = |needed: usize| RammError::Truncated {
            what: "index file",
            needed,
            found: bytes.len(),
        };
        if bytes.len() < 8 {
            return Err(truncated(HEADER_LEN));
        }
        if &bytes[..8] != INDEX_MAGIC {
            return Err(RammError::BadMagic {
                what: "index file",
                expected: "RAMMIDX1",
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN));
        }
        let u16_at = |at: usize| u16::from_le_bytes(bytes[at..at + 2].try_into().expect("2 bytes"));
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let version = u16_at(8);
        if version != INDEX_VERSION {
            return Err(RammError::UnsupportedVersion {
                what: "index file",
                found: version as u32,
            });
        }
        let d_proj = u16_at(10) as usize;
        let count = u64_at(12);
        let fingerprint = u64_at(20);
        if d_proj == 0 {
            return Err(RammError::format("index file", "d_proj is zero"));
        }
        let n = usize::try_from(count).map_err(|_| RammError::format("index file", "count overflows"))?;
        let needed = n
            .checked_mul(RECORD_LEN + 8 * d_proj)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| RammError::format("index file", "count overflows"))?;
        if bytes.len() < needed {
            return Err(truncated(needed));
        }
        if bytes.len() > needed {
            return Err(RammError::format("index file", format!("{} trailing bytes", bytes.len() - needed)));
        }
        let mut idx = EmbeddingIndex::empty(d_proj, fingerprint);
        let mut at = HEADER_LEN;
        for _ in 0..n {
            let id = u64_at(at);
            let tag = SourceTag::from_byte(bytes[at + 8])
                .ok_or_else(|| RammError::format("index file", format!("unknown source tag {}", bytes[at + 8])))?;
            let off = u64_at(at + 9);
            if off as usize >= captions.len().max(1) && !(n > 0 && captions.is_empty() && off == 0) {
                return Err(RammError::format("caption sidecar", format!("offset {off} past end")));
            }
            if idx.rows.insert(id, idx.ids.len()).is_some() {
                return Err(RammError::DuplicatePairId(id));
            }
            idx.ids.push(id);
            idx.tags.push(tag);
            idx.caption_offsets.push(off);
            at += RECORD_LEN;
        }
        let floats = |at: usize| -> Vec<f32> {
            bytes[at..at + 4 * n * d_proj]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        idx.text_vecs = floats(at);
        idx.image_vecs = floats(at + 4 * n * d_proj);
        if let Some(bad) = idx.caption_offsets.iter().find(|&&o| !captions.is_char_boundary(o as usize)) {
            return Err(RammError::format("caption sidecar", format!("offset {bad} splits a character")));
        }
        idx.captions = captions;
        Ok(idx)
    }

    /// SHA-256 of the serialized index and captions.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.encode());
        h.update(self.captions.as_bytes());
        h.finalize().into()
    }
}

/// Sidecar path for an index file: `<path>.captions`.
pub fn sidecar_path(index_path: &Path) -> PathBuf {
    let mut s = index_path.as_os_str().to_owned();
    s.push(".captions");
    PathBuf::from(s)
}

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, index.encode())?;
    fs::write(sidecar_path(path), index.captions.as_bytes())?;
    Ok(())
}

fn read_or_missing(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RammError::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    let bytes = read_or_missing(path)?;
    let captions = String::from_utf8(read_or_missing(&sidecar_path(path))?)
        .map_err(|_| RammError::format("caption sidecar", "not valid UTF-8"))?;
    EmbeddingIndex::decode(&bytes, captions)
}

/// Load an index and refuse it unless it was built with `model`'s projection heads.
pub fn load_index_for<T: Real>(path: &Path, model: &RammModel<T>) -> Result<EmbeddingIndex> {
    let idx = load_index(path)?;
    idx.check_fingerprint(fingerprint(model))?;
    Ok(idx)
}

/// Encode every item once with the frozen encoders, in corpus order.
/// Items whose image cannot be used are skipped and listed in the report.
pub fn build_store(
    items: &[StoreItem],
    model: &RammModel<f32>,
    vocab: &Vocab,
    max_text_len: usize,
    patch_grid: usize,
    exec: Exec,
) -> Result<(EmbeddingIndex, BuildReport)> {
    let d_proj = model.text_proj.lin.w.cols();
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = items.iter().find(|it| !seen.insert(it.pair_id)) {
        return Err(RammError::DuplicatePairId(dup.pair_id));
    }
    let ctx = crate::model::Ctx::inference();
    let encoded = exec.map(items, |_, it| -> std::result::Result<(Vec<f32>, Vec<f32>), String> {
        let img = it.image.clone()?;
        let grid = PatchGrid::new(img, patch_grid).map_err(|e| e.to_string())?;
        let seq = vocab.tokenize(&it.caption, max_text_len);
        let (w, _) = model.text.forward(&seq, &ctx, 0).map_err(|e| e.to_string())?;
        let (v, _) = model.image.forward(&grid, &ctx, 0).map_err(|e| e.to_string())?;
        let t = model.project_text(w.row(0)).map_err(|e| e.to_string())?;
        let i = model.project_image(v.row(0)).map_err(|e| e.to_string())?;
        Ok((t.into_data(), i.into_data()))
    });
    let mut idx = EmbeddingIndex::empty(d_proj, fingerprint(model));
    let mut report = BuildReport::default();
    for (it, enc) in items.iter().zip(encoded) {
        match enc {
            Ok((t, i)) => {
                idx.push(it.pair_id, it.source_tag, &it.caption, &t, &i)?;
                report.encoded += 1;
            }
            Err(reason) => {
                log::warn!("skipping pair {}: {reason}", it.pair_id);
                report.skipped.push((it.pair_id, reason));
            }
        }
    }
    Ok((idx, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::Init;
    use crate::model::ModelConfig;

    fn unit(seed: u64, d: usize) -> Vec<f32> {
        let t: Tensor<f32> = Init::new(seed).normal(&[d], 1.0);
        let n = t.norm();
        t.data().iter().map(|x| x / n).collect()
    }

    pub(crate) fn random_index(n: usize, d: usize, seed: u64) -> EmbeddingIndex {
        let mut idx = EmbeddingIndex::empty(d, 0xfeed);
        for k in 0..n {
            let tag = SourceTag::ALL[k % 5];
            idx.push(
                1000 + k as u64 * 7,
                tag,
                &format!("caption {k} ünïcode"),
                &unit(seed * 100_000 + 2 * k as u64, d),
                &unit(seed * 100_000 + 2 * k as u64 + 1, d),
            )
            .unwrap();
        }
        idx
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.idx");
        let idx = random_index(100, 6, 1);
        save_index(&idx, &p).unwrap();
        let back = load_index(&p).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.encode(), idx.encode());
        assert_eq!(back.caption(3), "caption 3 ünïcode");
        assert_eq!(back.record(3).caption_offset, idx.record(3).caption_offset);

        let empty = EmbeddingIndex::empty(4, 9);
        save_index(&empty, &p).unwrap();
        assert_eq!(load_index(&p).unwrap(), empty);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let idx = random_index(5, 4, 2);
        let bytes = idx.encode();
        let caps = idx.captions.clone();

        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        let e = EmbeddingIndex::decode(&bad, caps.clone()).unwrap_err();
        assert_eq!(e.code(), "bad-magic");

        let mut bad = bytes.clone();
        bad[8] = 7;
        let e = EmbeddingIndex::decode(&bad, caps.clone()).unwrap_err();
        assert_eq!(e.code(), "unsupported-version");

        let e = EmbeddingIndex::decode(&bytes[..bytes.len() - 3], caps.clone()).unwrap_err();
        assert_eq!(e.code(), "truncated");
        let e = EmbeddingIndex::decode(&bytes[..20], caps.clone()).unwrap_err();
        assert_eq!(e.code(), "truncated");

        let mut bad = bytes.clone();
        bad[HEADER_LEN + 8] = 200;
        assert_eq!(EmbeddingIndex::decode(&bad, caps.clone()).unwrap_err().code(), "format");

        let mut longer = bytes.clone();
        longer.push(0);
        assert_eq!(EmbeddingIndex::decode(&longer, caps).unwrap_err().code(), "format");

        assert_eq!(idx.check_fingerprint(1).unwrap_err().code(), "fingerprint-mismatch");
        assert!(idx.check_fingerprint(0xfeed).is_ok());

        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_index(&dir.path().join("nope.idx")).unwrap_err().code(), "missing-artifact");
    }

    #[test]
    fn push_rejects_duplicates_and_non_unit() {
        let mut idx = random_index(2, 3, 3);
        let v = unit(1, 3);
        assert!(matches!(
            idx.push(1000, SourceTag::Synth, "x", &v, &v),
            Err(RammError::DuplicatePairId(1000))
        ));
        assert!(idx.push(5, SourceTag::Synth, "x", &[1.0, 1.0, 0.0], &v).is_err());
    }

    #[test]
    fn source_tags_round_trip() {
        for t in SourceTag::ALL {
            assert_eq!(SourceTag::from_byte(t.to_byte()), Some(t));
            assert_eq!(t.as_str().parse::<SourceTag>().unwrap(), t);
        }
        assert!(SourceTag::from_byte(5).is_none());
    }

    fn micro_items(n: usize, c: &ModelConfig) -> Vec<StoreItem> {
        (0..n)
            .map(|k| StoreItem {
                pair_id: k as u64 + 1,
                source_tag: SourceTag::Synth,
                caption: format!("ct {}", if k % 2 == 0 { "left" } else { "right" }),
                image: Ok(Init::new(k as u64).normal(&[c.n_patches(), c.d_patch], 1.0)),
            })
            .collect()
    }

    #[test]
    fn build_store_contracts() {
        let vocab = Vocab::new(["ct", "left", "right"]);
        let c = ModelConfig::micro(vocab.len());
        let model: RammModel<f32> = RammModel::new(&c, 1).unwrap();

        let (empty, rep) = build_store(&[], &model, &vocab, c.max_text_len, c.patch_grid, Exec::Sequential).unwrap();
        assert!(empty.is_empty());
        assert_eq!(rep.encoded, 0);

        let items = micro_items(1, &c);
        let (one, _) = build_store(&items, &model, &vocab, c.max_text_len, c.patch_grid, Exec::Sequential).unwrap();
        let grid = PatchGrid::new(items[0].image.clone().unwrap(), c.patch_grid).unwrap();
        assert_eq!(one.image_vec(0), model.image_query(&grid).unwrap().data());
        let (w, _) = model
            .text
            .forward(&vocab.tokenize(&items[0].caption, c.max_text_len), &crate::model::Ctx::inference(), 0)
            .unwrap();
        assert_eq!(one.text_vec(0), model.project_text(w.row(0)).unwrap().data());

        let mut items = micro_items(100, &c);
        items[7].image = Err("unreadable".into());
        items[9].image = Ok(Tensor::zeros(&[3, 3]));
        let (a, rep) = build_store(&items, &model, &vocab, c.max_text_len, c.patch_grid, Exec::Parallel).unwrap();
        let (b, _) = build_store(&items, &model, &vocab, c.max_text_len, c.patch_grid, Exec::Sequential).unwrap();
        assert_eq!(a.encode(), b.encode());
        assert_eq!(rep.encoded, 98);
        assert_eq!(rep.skipped.iter().map(|s| s.0).collect::<Vec<_>>(), vec![8, 10]);
        for r in 0..a.len() {
            for v in [a.text_vec(r), a.image_vec(r)] {
                let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
        assert_eq!(a.fingerprint(), fingerprint(&model));

        items[3].pair_id = items[2].pair_id;
        assert!(matches!(
            build_store(&items, &model, &vocab, c.max_text_len, c.patch_grid, Exec::Sequential),
            Err(RammError::DuplicatePairId(3))
        ));
    }

    #[test]
    fn fingerprint_tracks_projection_weights() {
        let c = ModelConfig::micro(10);
        let mut model: RammModel<f32> = RammModel::new(&c, 1).unwrap();
        let f0 = fingerprint(&model);
        model.fusion[0].text.ffn.up.b.data_mut()[0] += 1.0;
        assert_eq!(fingerprint(&model), f0);
        model.image_proj.lin.b.data_mut()[0] += 1e-3;
        assert_ne!(fingerprint(&model), f0);
    }
}
