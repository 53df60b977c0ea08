//! Patch-feature records, the MMTF file format and synthetic planted features.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::ParallelExample;
use crate::error::{Error, Result};
use crate::probing::MaskedExample;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMTF";
pub const VERSION: u32 = 1;
/// Bytes before the first record: magic, version, record count.
pub const HEADER_BYTES: u64 = 4 + 4 + 8;

/// Visual features of one image, `[p × d_img]`, with an optional leading CLS row.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    pub image_id: String,
    pub patches: Tensor<f32>,
    pub has_cls: bool,
}

impl PatchFeatures {
    pub fn new(image_id: impl Into<String>, patches: Tensor<f32>, has_cls: bool) -> Result<Self> {
        if patches.shape().len() != 2 {
            return Err(Error::dim(format!(
                "patch matrix must be 2-D, got {:?}",
                patches.shape()
            )));
        }
        if !patches.is_finite() {
            return Err(Error::Contract(
                "patch features contain non-finite values".into(),
            ));
        }
        let image_id = image_id.into();
        if image_id.len() > u16::MAX as usize {
            return Err(Error::Contract(format!(
                "image id of {} bytes is too long",
                image_id.len()
            )));
        }
        Ok(PatchFeatures {
            image_id,
            patches,
            has_cls,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Size of this record in an MMTF file.
    pub fn encoded_len(&self) -> u64 {
        2 + self.image_id.len() as u64 + 1 + 4 + 4 + 4 * (self.patch_count() * self.dim()) as u64
    }
}

/// A named patch count and feature width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureRegime {
    pub name: String,
    pub patches: usize,
    pub d_img: usize,
    pub has_cls: bool,
}

impl FeatureRegime {
    /// The backbone regimes: ViT 384/16, 224/16, 384/32 and 224/32 with CLS,
    /// and a 7×7 convolutional grid without one.
    pub const STANDARD: [(&'static str, usize, bool); 5] = [
        ("vit-384-16", 577, true),
        ("vit-224-16", 197, true),
        ("vit-384-32", 145, true),
        ("vit-224-32", 50, true),
        ("grid-7x7", 49, false),
    ];

    pub fn standard(name: &str, d_img: usize) -> Option<Self> {
        Self::STANDARD
            .iter()
            .find(|(n, _, _)| *n == name)
            .map(|&(n, p, cls)| FeatureRegime {
                name: n.to_string(),
                patches: p,
                d_img,
                has_cls: cls,
            })
    }

    pub fn custom(patches: usize, d_img: usize, has_cls: bool) -> Result<Self> {
        if patches == 0 || d_img == 0 || (has_cls && patches < 2) {
            return Err(Error::Config(format!(
                "regime needs at least one non-CLS patch and d_img ≥ 1 (p={patches}, d={d_img})"
            )));
        }
        Ok(FeatureRegime {
            name: format!("custom-{patches}x{d_img}"),
            patches,
            d_img,
            has_cls,
        })
    }

    /// Rows available for planted signal.
    pub fn content_rows(&self) -> usize {
        self.patches - usize::from(self.has_cls)
    }
}

impl fmt::Display for FeatureRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (p={}, d={}, cls={})",
            self.name, self.patches, self.d_img, self.has_cls
        )
    }
}

impl FromStr for FeatureRegime {
    type Err = Error;

    /// `name` of a standard regime with `:d`, or `p:d[:cls]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| {
            x.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad regime `{s}`")))
        };
        match parts.as_slice() {
            [name, d] if name.parse::<usize>().is_err() => Self::standard(name, num(d)?)
                .ok_or_else(|| Error::Config(format!("unknown regime `{name}`"))),
            [p, d] => Self::custom(num(p)?, num(d)?, false),
            [p, d, "cls"] => Self::custom(num(p)?, num(d)?, true),
            _ => Err(Error::Config(format!("bad regime `{s}`"))),
        }
    }
}

pub fn write_features(path: &Path, records: &[PatchFeatures]) -> Result<()> {
    if let Some(first) = records.first() {
        if let Some(r) = records.iter().find(|r| r.dim() != first.dim()) {
            return Err(Error::dim(format!(
                "image `{}` has d_img {} but `{}` has {}",
                r.image_id,
                r.dim(),
                first.image_id,
                first.dim()
            )));
        }
    }
    let total = HEADER_BYTES + records.iter().map(PatchFeatures::encoded_len).sum::<u64>();
    let mut buf = Vec::with_capacity(total as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        buf.extend_from_slice(&(r.image_id.len() as u16).to_le_bytes());
        buf.extend_from_slice(r.image_id.as_bytes());
        buf.push(u8::from(r.has_cls));
        buf.extend_from_slice(&(r.patch_count() as u32).to_le_bytes());
        buf.extend_from_slice(&(r.dim() as u32).to_le_bytes());
        for &x in r.patches.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
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

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a complete MMTF buffer. Any defect fails the whole read.
pub fn decode_features(buf: &[u8]) -> Result<Vec<PatchFeatures>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected MMTF"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u64("record count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let start = r.pos as u64;
        let id_len = r.u16("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "image id")?)
            .map_err(|_| Error::format(start + 2, format!("record {i}: image id is not UTF-8")))?
            .to_string();
        let cls_at = r.pos as u64;
        let has_cls = match r.u8("cls flag")? {
            0 => false,
            1 => true,
            b => return Err(Error::format(cls_at, format!("record {i}: cls flag {b}"))),
        };
        let shape_at = r.pos as u64;
        let p = r.u32("patch count")? as usize;
        let d = r.u32("feature dim")? as usize;
        if p == 0 || d == 0 {
            return Err(Error::format(
                shape_at,
                format!("record {i}: empty shape {p}×{d}"),
            ));
        }
        let bytes = p
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| {
                Error::format(shape_at, format!("record {i}: shape {p}×{d} overflows"))
            })?;
        let payload = r.take(bytes, "patch payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let patches = Tensor::new(vec![p, d], data).expect("shape checked");
        let rec = PatchFeatures::new(id, patches, has_cls)
            .map_err(|e| Error::format(start, format!("record {i}: {e}")))?;
        out.push(rec);
    }
    if r.pos != buf.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after {count} records", buf.len() - r.pos),
        ));
    }
    Ok(out)
}

pub fn read_features(path: &Path) -> Result<Vec<PatchFeatures>> {
    decode_features(&std::fs::read(path)?)
}

/// Lookup of records by image id.
pub struct FeatureIndex {
    records: Vec<PatchFeatures>,
    by_id: HashMap<String, usize>,
}

impl FeatureIndex {
    pub fn new(records: Vec<PatchFeatures>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.image_id.clone(), i).is_some() {
                return Err(Error::Contract(format!(
                    "duplicate image id `{}`",
                    r.image_id
                )));
            }
        }
        Ok(FeatureIndex { records, by_id })
    }

    pub fn get(&self, id: &str) -> Result<&PatchFeatures> {
        self.by_id
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::Alignment(format!("no features for image `{id}`")))
    }

    pub fn records(&self) -> &[PatchFeatures] {
        &self.records
    }

    pub fn into_records(self) -> Vec<PatchFeatures> {
        self.records
    }
}

/// Parameters of the planted-signal feature generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub words: Vec<String>,
    /// Unit-norm signal rows, `[|words| × d_img]`.
    pub table: Tensor<f32>,
    pub sigma: f64,
    pub patches_per_signal: usize,
    pub regime: FeatureRegime,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Draws a gaussian signal table and normalises each row.
    pub fn new(words: Vec<String>, regime: FeatureRegime, sigma: f64, seed: u64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise scale must be ≥ 0, got {sigma}"
            )));
        }
        if words.is_empty() {
            return Err(Error::Config("no plantable words".into()));
        }
        let d = regime.d_img;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_7AB1E);
        let mut data = Vec::with_capacity(words.len() * d);
        for _ in &words {
            let row: Vec<f64> = (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            data.extend(row.iter().map(|x| (x / norm) as f32));
        }
        let table = Tensor::new(vec![words.len(), d], data)?;
        Ok(SyntheticSpec {
            words,
            table,
            sigma,
            patches_per_signal: 1,
            regime,
            seed,
        })
    }

    pub fn word_index(&self, w: &str) -> Option<usize> {
        self.words.iter().position(|x| x == w)
    }

    /// Index of the table row with the largest dot product with `row`.
    pub fn nearest_word(&self, row: &[f32]) -> usize {
        let d = self.regime.d_img;
        (0..self.words.len())
            .map(|i| {
                let e = &self.table.data()[i * d..(i + 1) * d];
                let s: f64 = e.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum();
                (i, s)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
            .0
    }
}

/// FNV-1a over the seed and image id, so each image's stream is independent
/// of record order.
pub fn record_seed(seed: u64, image_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(image_id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Synthesises one image: masked words are planted as `E[w] + noise` on
/// randomly chosen content rows, all other rows are noise, and the CLS row
/// (if any) is the mean of the others.
pub fn synthesize_one(
    image_id: &str,
    planted: &[&str],
    spec: &SyntheticSpec,
) -> Result<PatchFeatures> {
    let reg = &spec.regime;
    let (p, d) = (reg.patches, reg.d_img);
    if spec.table.shape() != [spec.words.len(), d] {
        return Err(Error::dim(format!(
            "signal table is {:?}, regime needs [{}, {d}]",
            spec.table.shape(),
            spec.words.len()
        )));
    }
    let offset = usize::from(reg.has_cls);
    let need = planted.len() * spec.patches_per_signal;
    if need > reg.content_rows() {
        return Err(Error::Generation(format!(
            "image `{image_id}` needs {need} signal rows but {} has {}",
            reg.name,
            reg.content_rows()
        )));
    }
    let rows: Vec<usize> = planted
        .iter()
        .map(|w| {
            spec.word_index(w)
                .ok_or_else(|| Error::Generation(format!("masked word `{w}` is not plantable")))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(spec.seed, image_id));
    let std = spec.sigma / (d as f64).sqrt();
    let mut data = vec![0f32; p * d];
    for x in data[offset * d..].iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x = (std * z) as f32;
    }
    let slots = sample(&mut rng, reg.content_rows(), need).into_vec();
    for (k, slot) in slots.into_iter().enumerate() {
        let w = rows[k / spec.patches_per_signal];
        let e = &spec.table.data()[w * d..(w + 1) * d];
        let row = &mut data[(slot + offset) * d..(slot + offset + 1) * d];
        for (x, &s) in row.iter_mut().zip(e) {
            *x += s;
        }
    }
    if reg.has_cls {
        let n = (p - 1) as f64;
        for j in 0..d {
            let mean = (1..p).map(|i| data[i * d + j] as f64).sum::<f64>() / n;
            data[j] = mean as f32;
        }
    }
    PatchFeatures::new(image_id, Tensor::new(vec![p, d], data)?, reg.has_cls)
}

/// Features for every example, planting the masked words of `masks[i]` into
/// image `examples[i].image_id`.
pub fn generate_synthetic(
    examples: &[ParallelExample],
    masks: &[MaskedExample],
    spec: &SyntheticSpec,
) -> Result<Vec<PatchFeatures>> {
    if examples.len() != masks.len() {
        return Err(Error::Alignment(format!(
            "{} examples but {} mask records",
            examples.len(),
            masks.len()
        )));
    }
    examples
        .iter()
        .zip(masks)
        .map(|(ex, m)| {
            let words: Vec<&str> = m.records.iter().map(|r| r.original.as_str()).collect();
            synthesize_one(&ex.image_id, &words, spec)
        })
        .collect()
}

/// Reassigns payloads with a uniformly random cyclic permutation (Sattolo),
/// so no image keeps its own features.
pub fn shuffle_incongruent(records: &[PatchFeatures], seed: u64) -> Result<Vec<PatchFeatures>> {
    let n = records.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "incongruent shuffle needs at least 2 records, got {n}"
        )));
    }
    let perm = derangement(n, seed);
    Ok((0..n)
        .map(|i| {
            let src = &records[perm[i]];
            PatchFeatures {
                image_id: records[i].image_id.clone(),
                patches: src.patches.clone(),
                has_cls: src.has_cls,
            }
        })
        .collect())
}

/// `perm[i] != i` for every `i`.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probing::{MaskCategory, MaskRecord};
    use proptest::prelude::*;

    fn rec(id: &str, p: usize, d: usize, cls: bool, base: f32) -> PatchFeatures {
        let t = Tensor::from_fn(&[p, d], |i| base + i as f32 * 0.25);
        PatchFeatures::new(id, t, cls).unwrap()
    }

    #[test]
    fn round_trip_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mmtf");
        let recs = vec![
            rec("a", 3, 4, true, 0.0),
            rec("img-β", 1, 4, false, -1.5),
            rec("", 5, 4, false, 1e-30),
        ];
        write_features(&path, &recs).unwrap();
        assert_eq!(read_features(&path).unwrap(), recs);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mmtf");
        write_features(&path, &[rec("a", 2, 2, false, 0.0)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        match decode_features(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mmtf");
        write_features(&path, &[rec("ab", 2, 3, false, 0.0)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        match decode_features(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, HEADER_BYTES + 2 + 2 + 1 + 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overflowing_shape_is_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.push(0);
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_features(&buf), Err(Error::Format { .. })));
    }

    #[test]
    fn vit_record_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mmtf");
        let id = "000123";
        let r = PatchFeatures::new(id, Tensor::zeros(&[577, 768]), true).unwrap();
        write_features(&path, std::slice::from_ref(&r)).unwrap();
        let expected = 16 + (2 + id.len() as u64 + 1 + 4 + 4) + 4 * 577 * 768;
        assert_eq!(std::fs::metadata(&path).unwrap().len(), expected);
        assert_eq!(expected, 1_772_577);
    }

    #[test]
    fn mixed_dims_are_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_features(
            &dir.path().join("f"),
            &[rec("a", 2, 2, false, 0.0), rec("b", 2, 3, false, 0.0)],
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    fn spec(sigma: f64) -> SyntheticSpec {
        let words = ["red", "suit", "dog", "man", "car"]
            .map(String::from)
            .to_vec();
        SyntheticSpec::new(
            words,
            FeatureRegime::custom(9, 16, true).unwrap(),
            sigma,
            11,
        )
        .unwrap()
    }

    #[test]
    fn noiseless_rows_equal_signal() {
        let s = spec(0.0);
        let f = synthesize_one("img", &["dog"], &s).unwrap();
        let d = 16;
        let e = &s.table.data()[2 * d..3 * d];
        let hits = (1..9)
            .filter(|&i| &f.patches.data()[i * d..(i + 1) * d] == e)
            .count();
        assert_eq!(hits, 1);
        let zeros = (1..9)
            .filter(|&i| {
                f.patches.data()[i * d..(i + 1) * d]
                    .iter()
                    .all(|&x| x == 0.0)
            })
            .count();
        assert_eq!(zeros, 7);
        // CLS is the row mean
        for (x, ej) in f.patches.data()[..d].iter().zip(e.iter()) {
            assert!((x - ej / 8.0).abs() < 1e-7);
        }
    }

    #[test]
    fn no_masks_means_pure_noise() {
        let s = spec(0.0);
        let f = synthesize_one("img", &[], &s).unwrap();
        assert!(f.patches.data().iter().all(|&x| x == 0.0));
        let s = spec(1.0);
        let f = synthesize_one("img", &[], &s).unwrap();
        let n = f.patches.data()[16..]
            .iter()
            .map(|&x| (x * x) as f64)
            .sum::<f64>()
            / 8.0;
        assert!((n.sqrt() - 1.0).abs() < 0.5, "row norm {n}");
    }

    #[test]
    fn unknown_word_is_named() {
        match synthesize_one("img", &["zebra"], &spec(0.0)) {
            Err(Error::Generation(m)) => assert!(m.contains("zebra")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn generation_is_deterministic_and_order_free() {
        let s = spec(0.5);
        let mk = |id: &str| {
            let ex = ParallelExample::new(vec!["a".into(), "dog".into()], vec![], id);
            let m = MaskedExample {
                original: ex.src.clone(),
                masked: vec!["a".into(), "[MASK_N]".into()],
                records: vec![MaskRecord {
                    position: 1,
                    category: MaskCategory::Noun,
                    original: "dog".into(),
                }],
            };
            (ex, m)
        };
        let (e1, m1) = mk("x");
        let (e2, m2) = mk("y");
        let a =
            generate_synthetic(&[e1.clone(), e2.clone()], &[m1.clone(), m2.clone()], &s).unwrap();
        let b = generate_synthetic(&[e2, e1], &[m2, m1], &s).unwrap();
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[0]);
        assert_ne!(a[0].patches, a[1].patches);
        assert_eq!(a[0].patch_count(), 9);
        assert_eq!(a[0].dim(), 16);
    }

    #[test]
    fn nearest_neighbour_oracle_degrades_with_noise() {
        let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let regime = FeatureRegime::custom(50, 32, true).unwrap();
        let mut accs = Vec::new();
        for sigma in [0.0, 0.5, 1.0, 2.0] {
            let s = SyntheticSpec::new(words.clone(), regime.clone(), sigma, 3).unwrap();
            let s0 = SyntheticSpec {
                sigma: 0.0,
                ..s.clone()
            };
            let (mut hit, mut total) = (0, 0);
            for n in 0..300 {
                let id = format!("{n:06}");
                let w = &words[n % words.len()];
                let f = synthesize_one(&id, &[w], &s).unwrap();
                // locate the signal row from the noiseless twin
                let clean = synthesize_one(&id, &[w], &s0).unwrap();
                let d = regime.d_img;
                let row = (1..regime.patches)
                    .find(|&i| {
                        clean.patches.data()[i * d..(i + 1) * d]
                            .iter()
                            .any(|&x| x != 0.0)
                    })
                    .unwrap();
                let got = s.nearest_word(&f.patches.data()[row * d..(row + 1) * d]);
                hit += usize::from(s.words[got] == *w);
                total += 1;
            }
            accs.push(hit as f64 / total as f64);
        }
        assert_eq!(accs[0], 1.0);
        assert!(accs.windows(2).all(|w| w[1] <= w[0]), "{accs:?}");
        assert!(accs[3] < accs[0], "{accs:?}");
    }

    #[test]
    fn two_records_swap() {
        let recs = vec![rec("a", 2, 2, false, 0.0), rec("b", 2, 2, false, 9.0)];
        let s = shuffle_incongruent(&recs, 123).unwrap();
        assert_eq!(s[0].image_id, "a");
        assert_eq!(s[0].patches, recs[1].patches);
        assert_eq!(s[1].patches, recs[0].patches);
    }

    #[test]
    fn single_record_cannot_be_deranged() {
        assert!(matches!(
            shuffle_incongruent(&[rec("a", 1, 1, false, 0.0)], 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn five_records_fixed_seed() {
        let p = derangement(5, 42);
        assert_eq!(p, derangement(5, 42));
        assert_eq!(p.iter().enumerate().filter(|(i, &j)| *i == j).count(), 0);
    }

    #[test]
    fn regimes() {
        let r: FeatureRegime = "vit-384-16:768".parse().unwrap();
        assert_eq!((r.patches, r.d_img, r.has_cls), (577, 768, true));
        assert_eq!(r.content_rows(), 576);
        let r: FeatureRegime = "49:2048".parse().unwrap();
        assert!(!r.has_cls);
        let r: FeatureRegime = "10:8:cls".parse().unwrap();
        assert!(r.has_cls);
        assert!("nope:3".parse::<FeatureRegime>().is_err());
        assert!(FeatureRegime::custom(1, 4, true).is_err());
    }

    proptest! {
        #[test]
        fn derangement_has_no_fixed_points(n in 2usize..200, seed in any::<u64>()) {
            let p = derangement(n, seed);
            let mut sorted = p.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }

        #[test]
        fn bitwise_round_trip(
            vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..40),
            cls in any::<bool>(),
        ) {
            let n = vals.len();
            let r = PatchFeatures::new("p", Tensor::new(vec![n, 1], vals).unwrap(), cls).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("f");
            write_features(&path, std::slice::from_ref(&r)).unwrap();
            let back = read_features(&path).unwrap();
            let a: Vec<u32> = r.patches.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back[0].patches.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
