use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use rayon::prelude::*;

use super::{DataError, ImageRecord, Manifest};

fn unreadable(path: &Path, e: impl ToString) -> DataError {
    DataError::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn check_quality(qf: i64) -> Result<u8, DataError> {
    if (1..=100).contains(&qf) {
        Ok(qf as u8)
    } else {
        Err(DataError::BadQuality(qf))
    }
}

/// Decodes `src` and writes it to `dst` as baseline JPEG with 4:2:0 chroma
/// subsampling at quality `qf`. Returns the image dimensions.
pub fn jpeg_reencode_file(src: &Path, dst: &Path, qf: u8) -> Result<(u32, u32), DataError> {
    let qf = check_quality(i64::from(qf))?;
    let img = image::open(src).map_err(|e| unreadable(src, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let fail = |reason: String| DataError::EncodeFailure {
        path: src.to_path_buf(),
        qf,
        reason,
    };
    let (w16, h16) = match (u16::try_from(w), u16::try_from(h)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(fail(format!("{w}x{h} exceeds JPEG limits"))),
    };
    if let Some(dir) = dst.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut encoder = Encoder::new_file(dst, qf).map_err(|e| fail(e.to_string()))?;
    encoder.set_sampling_factor(SamplingFactor::R_4_2_0);
    encoder
        .encode(img.as_raw(), w16, h16, ColorType::Rgb)
        .map_err(|e| fail(e.to_string()))?;
    Ok((w, h))
}

/// Mean absolute difference over all RGB samples of two equally sized images.
pub fn mean_abs_pixel_diff(a: &Path, b: &Path) -> Result<f64, DataError> {
    let x = image::open(a).map_err(|e| unreadable(a, e))?.to_rgb8();
    let y = image::open(b).map_err(|e| unreadable(b, e))?.to_rgb8();
    if x.dimensions() != y.dimensions() {
        return Err(DataError::InvalidRecord(format!(
            "{} and {} differ in size",
            a.display(),
            b.display()
        )));
    }
    let total: u64 = x
        .as_raw()
        .iter()
        .zip(y.as_raw())
        .map(|(&p, &q)| u64::from(p.abs_diff(q)))
        .sum();
    Ok(total as f64 / x.as_raw().len() as f64)
}

/// Deepest directory containing every record.
fn common_root(records: &[ImageRecord]) -> PathBuf {
    let mut iter = records.iter().filter_map(|r| r.path.parent());
    let Some(first) = iter.next() else {
        return PathBuf::new();
    };
    let mut root: Vec<_> = first.components().collect();
    for p in iter {
        let n = root
            .iter()
            .zip(p.components())
            .take_while(|(a, b)| *a == b)
            .count();
        root.truncate(n);
    }
    root.iter().collect()
}

/// Re-encodes every image of `m` at each quality factor under
/// `out_dir/qf<QF>/`, keeping paths relative to the manifest's common root.
pub fn jpeg_corpus(
    m: &Manifest,
    qf_list: &[i64],
    out_dir: &Path,
) -> Result<BTreeMap<u8, Manifest>, DataError> {
    if qf_list.is_empty() {
        return Err(DataError::BadSpec("empty quality factor list".into()));
    }
    let qfs = qf_list
        .iter()
        .map(|&q| check_quality(q))
        .collect::<Result<Vec<u8>, _>>()?;
    let root = common_root(m.records());
    let mut out = BTreeMap::new();
    for qf in qfs {
        let qdir = out_dir.join(format!("qf{qf}"));
        let records = m
            .records()
            .par_iter()
            .map(|r| {
                let rel = r.path.strip_prefix(&root).unwrap_or(&r.path);
                let dst = qdir.join(rel).with_extension("jpg");
                let (width, height) = jpeg_reencode_file(&r.path, &dst, qf)?;
                Ok(ImageRecord {
                    path: dst,
                    width,
                    height,
                    ..r.clone()
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        let manifest = Manifest::new(
            records,
            m.seed,
            format!("jpeg qf={qf} of [{}]", m.provenance),
        )?;
        out.insert(qf, manifest);
    }
    Ok(out)
}
