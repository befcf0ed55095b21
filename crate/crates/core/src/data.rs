//! Dataset generation and ingestion: synthetic whitened designs, the MNIST
//! IDX format, CIFAR-10 binary batches (grayscale-downsampled rows for MLPs
//! or patch rows for the conv solver), and balanced two-class subsets.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PatchLayout};
use crate::error::{AkernError, Result};
use crate::sampling;

/// Label convention for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelNorm {
    /// Alternating +1/-1.
    PlusMinusOne,
    /// Alternating +-1/sqrt(P), so |y| = 1.
    UnitNorm,
}

/// Fresh Gaussian rows rescaled to |x| = sqrt(D), matching the marginal
/// scale of a whitened design without being orthogonal to anything.
pub fn synth_sphere_rows(p: usize, d: usize, seed: u64) -> Result<Array2<f64>> {
    let mut rng = sampling::rng_from_seed(seed);
    let mut x = sampling::standard_normal_matrix(p, d, &mut rng);
    for mut row in x.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm < 1e-12 {
            return Err(AkernError::InvalidArgument("degenerate draw".into()));
        }
        let scale = (d as f64).sqrt() / norm;
        row.mapv_inplace(|v| v * scale);
    }
    Ok(x)
}

/// Orthonormalized Gaussian rows scaled so that x_m . x_n / D = delta_mn.
pub fn synth_whitened(p: usize, d: usize, seed: u64, labels: LabelNorm) -> Result<Dataset> {
    if p > d {
        return Err(AkernError::InvalidArgument(format!(
            "whitened design needs P <= D, got P={p} D={d}"
        )));
    }
    let mut rng = sampling::rng_from_seed(seed);
    let mut x = sampling::standard_normal_matrix(p, d, &mut rng);
    // Gram-Schmidt on the rows, two passes for numerical orthogonality.
    for _ in 0..2 {
        for i in 0..p {
            for j in 0..i {
                let proj = {
                    let ri = x.row(i);
                    let rj = x.row(j);
                    ri.dot(&rj) / rj.dot(&rj)
                };
                let rj = x.row(j).to_owned();
                let mut ri = x.row_mut(i);
                for (a, b) in ri.iter_mut().zip(rj.iter()) {
                    *a -= proj * b;
                }
            }
            let norm = x.row(i).dot(&x.row(i)).sqrt();
            if norm < 1e-12 {
                return Err(AkernError::InvalidArgument(
                    "degenerate draw in whitened design".into(),
                ));
            }
            let scale = (d as f64).sqrt() / norm;
            x.row_mut(i).mapv_inplace(|v| v * scale);
        }
    }
    let mut y = Array1::<f64>::zeros(p);
    for mu in 0..p {
        let sign = if mu % 2 == 0 { 1.0 } else { -1.0 };
        y[mu] = match labels {
            LabelNorm::PlusMinusOne => sign,
            LabelNorm::UnitNorm => sign / (p as f64).sqrt(),
        };
    }
    Dataset::new(x, y)
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(AkernError::DataFormat {
            offset: offset as u64,
            message: "file truncated".into(),
        })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label pair. Pixels are scaled by 1/255; labels come
/// back as raw class indices in the targets vector.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let lab = std::fs::read(labels_path)?;
    let magic = read_be_u32(&img, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(AkernError::DataFormat {
            offset: 0,
            message: format!("bad IDX image magic {magic:#010x}, want {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(&img, 4)? as usize;
    let rows = read_be_u32(&img, 8)? as usize;
    let cols = read_be_u32(&img, 12)? as usize;
    let pixel_bytes = count * rows * cols;
    if img.len() != 16 + pixel_bytes {
        return Err(AkernError::DataFormat {
            offset: img.len() as u64,
            message: format!("IDX image payload is {} bytes, want {}", img.len() - 16, pixel_bytes),
        });
    }
    let lmagic = read_be_u32(&lab, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(AkernError::DataFormat {
            offset: 0,
            message: format!("bad IDX label magic {lmagic:#010x}, want {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let lcount = read_be_u32(&lab, 4)? as usize;
    if lcount != count {
        return Err(AkernError::DataFormat {
            offset: 4,
            message: format!("{lcount} labels for {count} images"),
        });
    }
    if lab.len() != 8 + lcount {
        return Err(AkernError::DataFormat {
            offset: lab.len() as u64,
            message: "IDX label payload truncated".into(),
        });
    }
    let d = rows * cols;
    let mut inputs = Array2::<f64>::zeros((count, d));
    for i in 0..count {
        for j in 0..d {
            inputs[[i, j]] = img[16 + i * d + j] as f64 / 255.0;
        }
    }
    let targets = Array1::from_iter((0..count).map(|i| lab[8 + i] as f64));
    Dataset::new(inputs, targets)
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// How CIFAR rows are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarMode {
    /// Grayscale luma, bilinear 32 -> 28 downsample, flat D = 784.
    GrayscaleMlp,
    /// Keep 32x32x3, split into 16 non-overlapping 8x8 patches of
    /// dimension 192 (row, column, channel order inside each patch).
    PatchesCnn,
}

/// Load CIFAR-10 binary batches. Targets hold the raw class index; pixel
/// values are scaled by 1/255 before any further processing.
pub fn load_cifar10_binary(batch_paths: &[impl AsRef<Path>], mode: CifarMode) -> Result<Dataset> {
    let mut raw: Vec<(u8, Vec<f64>)> = Vec::new();
    for path in batch_paths {
        let bytes = std::fs::read(path.as_ref())?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(AkernError::DataFormat {
                offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                message: format!(
                    "batch length {} is not a multiple of the {}-byte record",
                    bytes.len(),
                    CIFAR_RECORD
                ),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0];
            let pixels: Vec<f64> = rec[1..].iter().map(|b| *b as f64 / 255.0).collect();
            raw.push((label, pixels));
        }
    }
    if raw.is_empty() {
        return Err(AkernError::DataFormat {
            offset: 0,
            message: "no CIFAR records found".into(),
        });
    }
    let count = raw.len();
    match mode {
        CifarMode::GrayscaleMlp => {
            let out_side = 28usize;
            let d = out_side * out_side;
            let mut inputs = Array2::<f64>::zeros((count, d));
            for (i, (_, px)) in raw.iter().enumerate() {
                let gray = luma_plane(px);
                let small = bilinear_downsample(&gray, CIFAR_SIDE, out_side);
                for (j, v) in small.iter().enumerate() {
                    inputs[[i, j]] = *v;
                }
            }
            let targets = Array1::from_iter(raw.iter().map(|(l, _)| *l as f64));
            Dataset::new(inputs, targets)
        }
        CifarMode::PatchesCnn => {
            let layout = PatchLayout {
                patch_count: 16,
                patch_dim: 192,
            };
            let mut inputs = Array2::<f64>::zeros((count, 3072));
            for (i, (_, px)) in raw.iter().enumerate() {
                let row = patchify_cifar(px);
                for (j, v) in row.iter().enumerate() {
                    inputs[[i, j]] = *v;
                }
            }
            let targets = Array1::from_iter(raw.iter().map(|(l, _)| *l as f64));
            Dataset::with_patches(inputs, targets, Some(layout))
        }
    }
}

/// Luma grayscale 0.299 R + 0.587 G + 0.114 B from the channel-planar
/// CIFAR pixel block.
fn luma_plane(pixels: &[f64]) -> Vec<f64> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    (0..plane)
        .map(|i| 0.299 * pixels[i] + 0.587 * pixels[plane + i] + 0.114 * pixels[2 * plane + i])
        .collect()
}

/// Align-corners bilinear resample of a square image.
fn bilinear_downsample(src: &[f64], src_side: usize, dst_side: usize) -> Vec<f64> {
    let scale = (src_side - 1) as f64 / (dst_side - 1) as f64;
    let mut out = vec![0.0; dst_side * dst_side];
    for i in 0..dst_side {
        for j in 0..dst_side {
            let fy = i as f64 * scale;
            let fx = j as f64 * scale;
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(src_side - 1);
            let x1 = (x0 + 1).min(src_side - 1);
            let dy = fy - y0 as f64;
            let dx = fx - x0 as f64;
            let v = src[y0 * src_side + x0] * (1.0 - dy) * (1.0 - dx)
                + src[y0 * src_side + x1] * (1.0 - dy) * dx
                + src[y1 * src_side + x0] * dy * (1.0 - dx)
                + src[y1 * src_side + x1] * dy * dx;
            out[i * dst_side + j] = v;
        }
    }
    out
}

/// Rearrange a channel-planar 32x32x3 pixel block into 16 patch vectors of
/// 8x8x3 values (row, column, channel order within each patch).
pub fn patchify_cifar(pixels: &[f64]) -> Vec<f64> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(3072);
    for pr in 0..4 {
        for pc in 0..4 {
            for r in 0..8 {
                for c in 0..8 {
                    let y = pr * 8 + r;
                    let x = pc * 8 + c;
                    for ch in 0..3 {
                        out.push(pixels[ch * plane + y * CIFAR_SIDE + x]);
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify_cifar`].
pub fn unpatchify_cifar(row: &[f64]) -> Vec<f64> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = vec![0.0; 3 * plane];
    let mut idx = 0;
    for pr in 0..4 {
        for pc in 0..4 {
            for r in 0..8 {
                for c in 0..8 {
                    let y = pr * 8 + r;
                    let x = pc * 8 + c;
                    for ch in 0..3 {
                        out[ch * plane + y * CIFAR_SIDE + x] = row[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

/// Balanced two-class subset with labels -1 (class_a) and +1 (class_b),
/// deterministically shuffled by `seed`. `p` must be even.
pub fn two_class_subset(
    dataset: &Dataset,
    class_a: usize,
    class_b: usize,
    p: usize,
    seed: u64,
) -> Result<Dataset> {
    if p == 0 || p % 2 != 0 {
        return Err(AkernError::InvalidArgument(
            "balanced subset needs an even P".into(),
        ));
    }
    let mut idx_a = Vec::new();
    let mut idx_b = Vec::new();
    for (i, &t) in dataset.targets().iter().enumerate() {
        if t == class_a as f64 {
            idx_a.push(i);
        } else if t == class_b as f64 {
            idx_b.push(i);
        }
    }
    let half = p / 2;
    if idx_a.len() < half || idx_b.len() < half {
        return Err(AkernError::InvalidArgument(format!(
            "need {half} examples of each class, found {} and {}",
            idx_a.len(),
            idx_b.len()
        )));
    }
    let mut rng = sampling::rng_from_seed(seed);
    idx_a.shuffle(&mut rng);
    idx_b.shuffle(&mut rng);
    let mut rows = Vec::with_capacity(p);
    let mut labels = Vec::with_capacity(p);
    for i in 0..half {
        rows.push(idx_a[i]);
        labels.push(-1.0);
        rows.push(idx_b[i]);
        labels.push(1.0);
    }
    let picked = dataset.subset(&rows)?;
    Dataset::with_patches(
        picked.inputs().clone(),
        Array1::from_vec(labels),
        picked.patch_layout(),
    )
}

/// Write a dataset as CSV: row-major inputs with the target as the last
/// column.
pub fn write_dataset_csv<W: std::io::Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    for (row, y) in dataset
        .inputs()
        .rows()
        .into_iter()
        .zip(dataset.targets().iter())
    {
        let mut cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        cells.push(format!("{y:.16e}"));
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel;
    use crate::linalg;
    use ndarray::Array2;

    #[test]
    fn whitened_gram_is_identity() {
        let ds = synth_whitened(6, 16, 42, LabelNorm::PlusMinusOne).unwrap();
        let g = kernel::data_gram(&ds);
        assert!(linalg::max_abs(&(g.entries() - &Array2::<f64>::eye(6))) < 1e-12);
        assert!(ds.targets().iter().all(|y| y.abs() == 1.0));
    }

    #[test]
    fn unit_norm_labels_have_unit_norm() {
        let ds = synth_whitened(5, 8, 1, LabelNorm::UnitNorm).unwrap();
        let norm: f64 = ds.targets().iter().map(|y| y * y).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-14);
    }

    #[test]
    fn whitened_is_deterministic_and_rejects_p_above_d() {
        let a = synth_whitened(4, 8, 7, LabelNorm::PlusMinusOne).unwrap();
        let b = synth_whitened(4, 8, 7, LabelNorm::PlusMinusOne).unwrap();
        assert_eq!(a.inputs(), b.inputs());
        assert!(synth_whitened(9, 8, 7, LabelNorm::PlusMinusOne).is_err());
    }

    fn idx_fixture(count: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(count as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..count * rows * cols {
            img.push((i % 251) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(count as u32).to_be_bytes());
        for i in 0..count {
            lab.push((i % 10) as u8);
        }
        (img, lab)
    }

    #[test]
    fn idx_roundtrip_and_magic_check() {
        let dir = std::env::temp_dir().join("akern-idx-test");
        std::fs::create_dir_all(&dir).unwrap();
        let (img, lab) = idx_fixture(3, 4, 4);
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 16);
        // First pixel of image zero is 0, second is 1/255.
        assert_eq!(ds.inputs()[[0, 0]], 0.0);
        assert!((ds.inputs()[[0, 1]] - 1.0 / 255.0).abs() < 1e-15);
        // Wrong magic is rejected.
        let mut bad = img.clone();
        bad[3] = 0x99;
        std::fs::write(&ip, &bad).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp),
            Err(AkernError::DataFormat { .. })
        ));
        // Label count mismatch is rejected.
        std::fs::write(&ip, &img).unwrap();
        let (_, mut lab_short) = idx_fixture(2, 4, 4);
        lab_short[7] = 2;
        std::fs::write(&lp, &lab_short).unwrap();
        assert!(load_mnist_idx(&ip, &lp).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    fn cifar_fixture(count: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(count * CIFAR_RECORD);
        for i in 0..count {
            out.push((i % 10) as u8);
            for j in 0..3072 {
                out.push(((i * 31 + j) % 256) as u8);
            }
        }
        out
    }

    #[test]
    fn cifar_record_alignment_checked() {
        let dir = std::env::temp_dir().join("akern-cifar-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("batch.bin");
        let mut bytes = cifar_fixture(4);
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_binary(&[&path], CifarMode::GrayscaleMlp).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.dim(), 784);
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_cifar10_binary(&[&path], CifarMode::GrayscaleMlp).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pure_red_pixel_luma() {
        let mut px = vec![0.0; 3072];
        px[0] = 1.0; // R channel of pixel (0,0) at full intensity
        let gray = luma_plane(&px);
        assert!((gray[0] - 0.299).abs() < 1e-15);
    }

    #[test]
    fn patchify_roundtrip_is_identity() {
        let px: Vec<f64> = (0..3072).map(|i| (i as f64) / 3072.0).collect();
        let patched = patchify_cifar(&px);
        let back = unpatchify_cifar(&patched);
        assert_eq!(px, back);
    }

    #[test]
    fn cnn_mode_carries_patch_layout() {
        let dir = std::env::temp_dir().join("akern-cifar-cnn-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("batch.bin");
        std::fs::write(&path, cifar_fixture(2)).unwrap();
        let ds = load_cifar10_binary(&[&path], CifarMode::PatchesCnn).unwrap();
        let layout = ds.patch_layout().unwrap();
        assert_eq!(layout.patch_count, 16);
        assert_eq!(layout.patch_dim, 192);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn two_class_subset_is_balanced_and_signed() {
        let dir = std::env::temp_dir().join("akern-subset-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("batch.bin");
        std::fs::write(&path, cifar_fixture(40)).unwrap();
        let ds = load_cifar10_binary(&[&path], CifarMode::GrayscaleMlp).unwrap();
        let sub = two_class_subset(&ds, 0, 1, 4, 9).unwrap();
        let pos = sub.targets().iter().filter(|y| **y == 1.0).count();
        let neg = sub.targets().iter().filter(|y| **y == -1.0).count();
        assert_eq!(pos, 2);
        assert_eq!(neg, 2);
        assert!(two_class_subset(&ds, 0, 1, 400, 9).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn disjoint_splits_under_different_seeds_by_index_bookkeeping() {
        // Draw train and test subsets from disjoint halves of the pool.
        let dir = std::env::temp_dir().join("akern-split-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("batch.bin");
        std::fs::write(&path, cifar_fixture(40)).unwrap();
        let pool = load_cifar10_binary(&[&path], CifarMode::GrayscaleMlp).unwrap();
        let first_half: Vec<usize> = (0..20).collect();
        let second_half: Vec<usize> = (20..40).collect();
        let train_pool = pool.subset(&first_half).unwrap();
        let test_pool = pool.subset(&second_half).unwrap();
        let train = two_class_subset(&train_pool, 0, 1, 2, 1).unwrap();
        let test = two_class_subset(&test_pool, 0, 1, 2, 2).unwrap();
        for tr in train.inputs().rows() {
            for te in test.inputs().rows() {
                assert!(tr != te);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
