//! `CRKB` file format (little-endian):
//!
//! ```text
//! "CRKB" | version u8 = 1 | metric u8 | d u32 | m u32 | k* u32 | N u64
//! | source_tag (u16 len + UTF-8) | centroids m·k*·d* f32
//! | codes N·m (u8 when k* ≤ 256, else u16) | ids N u64
//! | label_flag u8 | labels N i32 (when flag = 1)
//! ```

use std::fs;
use std::path::Path;

use super::codebook::{Metric, PQCode, PQCodebook, PqLayout};
use super::store::KnowledgeBase;
use super::PqError;
use crate::binio::{put_short_str, Reader, Truncated};

pub const KB_MAGIC: &[u8; 4] = b"CRKB";
pub const KB_VERSION: u8 = 1;

impl From<Truncated> for PqError {
    fn from(t: Truncated) -> Self {
        PqError::Truncated { offset: t.offset, needed: t.needed }
    }
}

pub fn kb_to_bytes(kb: &KnowledgeBase) -> Vec<u8> {
    let layout = kb.layout();
    let mut out = Vec::new();
    out.extend_from_slice(KB_MAGIC);
    out.push(KB_VERSION);
    out.push(kb.codebook().metric().tag());
    out.extend_from_slice(&(layout.d as u32).to_le_bytes());
    out.extend_from_slice(&(layout.m as u32).to_le_bytes());
    out.extend_from_slice(&(layout.k_star as u32).to_le_bytes());
    out.extend_from_slice(&(kb.len() as u64).to_le_bytes());
    put_short_str(&mut out, kb.source_tag());
    for c in kb.codebook().raw_centroids() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    let wide = layout.index_width() == 2;
    for code in kb.codes() {
        for &i in code.indices() {
            if wide {
                out.extend_from_slice(&i.to_le_bytes());
            } else {
                out.push(i as u8);
            }
        }
    }
    for id in kb.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    match kb.labels() {
        Some(labels) => {
            out.push(1);
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    out
}

pub fn kb_from_bytes(bytes: &[u8]) -> Result<KnowledgeBase, PqError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != KB_MAGIC {
        return Err(PqError::BadMagic { found: magic.try_into().expect("4 bytes") });
    }
    let version = r.u8()?;
    if version != KB_VERSION {
        return Err(PqError::UnsupportedVersion(version));
    }
    let metric_tag = r.u8()?;
    let metric = Metric::from_tag(metric_tag).ok_or_else(|| PqError::Malformed(format!("metric tag {metric_tag}")))?;
    let layout = PqLayout { d: r.u32()? as usize, m: r.u32()? as usize, k_star: r.u32()? as usize };
    layout.validate().map_err(|e| PqError::Malformed(e.to_string()))?;
    let n = r.u64()?;
    let tag = std::str::from_utf8(r.short_bytes()?)
        .map_err(|_| PqError::Malformed("source tag is not UTF-8".into()))?
        .to_owned();

    r.ensure(layout.storage_scalars() as u64, 4)?;
    let centroids = (0..layout.storage_scalars()).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
    let codebook = PQCodebook::from_raw(layout, metric, centroids).map_err(|e| PqError::Malformed(e.to_string()))?;

    let width = layout.index_width();
    // The label block is optional, so the declared N fixes exactly two
    // admissible payload sizes; anything shorter than the larger one is a
    // truncated file.
    let base = n.saturating_mul(layout.m as u64 * width as u64).saturating_add(n.saturating_mul(8)).saturating_add(1);
    let labelled = base.saturating_add(n.saturating_mul(4));
    let remaining = r.remaining() as u64;
    if remaining != base && remaining < labelled {
        return Err(PqError::Truncated {
            offset: r.position(),
            needed: usize::try_from(labelled.max(base)).unwrap_or(usize::MAX),
        });
    }
    let n = n as usize;
    let mut codes = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = (0..layout.m)
            .map(|_| if width == 2 { r.u16() } else { r.u8().map(u16::from) })
            .collect::<Result<Vec<_>, _>>()?;
        codes.push(PQCode(idx));
    }
    r.ensure(n as u64, 8)?;
    let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
    let labels = match r.u8()? {
        0 => None,
        1 => {
            r.ensure(n as u64, 4)?;
            Some((0..n).map(|_| r.i32()).collect::<Result<Vec<_>, _>>()?)
        }
        f => return Err(PqError::Malformed(format!("label flag {f}"))),
    };
    if r.remaining() != 0 {
        return Err(PqError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    KnowledgeBase::new(codebook, codes, ids, labels, tag).map_err(|e| PqError::Malformed(e.to_string()))
}

/// Writes `kb` to `path`; returns the number of bytes written.
pub fn kb_save(kb: &KnowledgeBase, path: impl AsRef<Path>) -> Result<u64, PqError> {
    let bytes = kb_to_bytes(kb);
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn kb_load(path: impl AsRef<Path>) -> Result<KnowledgeBase, PqError> {
    kb_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::pqkb::PQConfig;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn kb(n: usize, k_star: usize, labels: bool, seed: u64) -> KnowledgeBase {
        let mut r = rng::stream(seed, &[]);
        let x = Matrix::from_vec(n, 8, (0..n * 8).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let labels = labels.then(|| (0..n as i32).map(|i| i % 3 - 1).collect());
        let ids = (0..n as u64).map(|i| i * 7 + 3).collect();
        KnowledgeBase::build(&x, ids, labels, &PQConfig::new(8, 2).with_k_star(k_star).with_seed(seed), "pkb:dev")
            .unwrap()
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.crkb");
        let original = kb(50, 16, true, 1);
        let written = kb_save(&original, &path).unwrap();
        assert_eq!(written, std::fs::metadata(&path).unwrap().len());
        assert_eq!(kb_load(&path).unwrap(), original);
    }

    #[test]
    fn wide_indices_roundtrip() {
        let original = kb(20, 300, false, 2);
        let bytes = kb_to_bytes(&original);
        assert_eq!(kb_from_bytes(&bytes).unwrap(), original);
    }

    #[test]
    fn header_layout() {
        let k = kb(10, 16, false, 3);
        let b = kb_to_bytes(&k);
        assert_eq!(&b[..4], b"CRKB");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(b[10..14].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[14..18].try_into().unwrap()), 16);
        assert_eq!(u64::from_le_bytes(b[18..26].try_into().unwrap()), 10);
        let tag_len = 7;
        let expected = 26 + 2 + tag_len + 2 * 16 * 4 * 4 + 10 * 2 + 10 * 8 + 1;
        assert_eq!(b.len(), expected);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut b = kb_to_bytes(&kb(10, 16, false, 4));
        b[0] = b'X';
        assert!(matches!(kb_from_bytes(&b), Err(PqError::BadMagic { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut b = kb_to_bytes(&kb(10, 16, false, 4));
        b[4] = 9;
        assert!(matches!(kb_from_bytes(&b), Err(PqError::UnsupportedVersion(9))));
    }

    #[test]
    fn overstated_count_is_truncation() {
        let mut b = kb_to_bytes(&kb(10, 16, true, 5));
        b[18..26].copy_from_slice(&11u64.to_le_bytes());
        assert!(matches!(kb_from_bytes(&b), Err(PqError::Truncated { .. })));
        b[18..26].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(kb_from_bytes(&b), Err(PqError::Truncated { .. })));
        let short = kb_to_bytes(&kb(10, 16, true, 5));
        assert!(matches!(kb_from_bytes(&short[..short.len() - 3]), Err(PqError::Truncated { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn roundtrip_is_bit_exact(n in 1usize..40, k_star in 2usize..40, labels: bool, seed: u64) {
            let original = kb(n, k_star, labels, seed);
            let bytes = kb_to_bytes(&original);
            let back = kb_from_bytes(&bytes).unwrap();
            prop_assert_eq!(kb_to_bytes(&back), bytes);
            prop_assert_eq!(back, original);
        }
    }
}
