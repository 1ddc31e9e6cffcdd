//! Patch datasets and the file formats around them.
//!
//! Matrices are stored in a small binary container: the ASCII magic `SSDL`,
//! a little-endian `u32` version (1), `u64` rows, `u64` cols, then the values
//! as little-endian binary64 in column-major order. Images are binary PGM
//! (`P5`, maxval 255).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, Stream};

const MAGIC: &[u8; 4] = b"SSDL";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Post-centering norm below which a patch is considered constant.
pub const DEGENERATE_NORM: f64 = 1e-10;

/// Default relative eigenvalue floor for whitening.
pub const DEFAULT_WHITENING_EPS: f64 = 1e-5;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        GrayImage {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// Serializes as binary PGM.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start as u64, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, format!("{what} out of range")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "not a binary PGM (expected P5)"));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(maxval_at as u64, format!("maxval {maxval} unsupported, need 255")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(cur.pos as u64, "missing separator after header"));
    }
    let start = cur.pos + 1;
    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(0, "image dimensions overflow"))?;
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::format(bytes.len() as u64, format!("truncated pixel data: {have} of {need} bytes")));
    }
    GrayImage::new(height, width, bytes[start..start + need].to_vec())
}

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let field = |at: usize, len: usize, what: &str| -> Result<&[u8]> {
        bytes
            .get(at..at + len)
            .ok_or_else(|| Error::format(bytes.len() as u64, format!("truncated header: missing {what}")))
    };
    if field(0, 4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected SSDL"));
    }
    let version = u32::from_le_bytes(field(4, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(field(8, 8, "row count")?.try_into().unwrap());
    let cols = u64::from_le_bytes(field(16, 8, "column count")?.try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::format(8, format!("{rows}x{cols} matrix is too large")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < count {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated data: {} of {count} bytes", body.len()),
        ));
    }
    if body.len() > count {
        return Err(Error::format((HEADER_LEN + count) as u64, "trailing bytes after matrix data"));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Ok(DMatrix::from_iterator(rows as usize, cols as usize, values))
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, encode_matrix(m))?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    decode_matrix(&fs::read(path)?)
}

/// Training signals, one patch per column in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    y: DMatrix<f64>,
    patch_h: usize,
    patch_w: usize,
    provenance: String,
}

impl PatchDataset {
    pub fn new(y: DMatrix<f64>, patch_h: usize, patch_w: usize, provenance: impl Into<String>) -> Result<Self> {
        if patch_h * patch_w != y.nrows() {
            return Err(Error::Dimension(format!(
                "{patch_h}x{patch_w} patches need {} rows, got {}",
                patch_h * patch_w,
                y.nrows()
            )));
        }
        if y.ncols() == 0 {
            return Err(Error::Domain("dataset has no columns".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset contains non-finite values".into()));
        }
        Ok(PatchDataset {
            y,
            patch_h,
            patch_w,
            provenance: provenance.into(),
        })
    }

    /// Wraps a matrix whose patch shape is square (`m` a perfect square) or
    /// otherwise a single column of pixels.
    pub fn from_matrix(y: DMatrix<f64>, provenance: impl Into<String>) -> Result<Self> {
        let m = y.nrows();
        let side = (m as f64).sqrt().round() as usize;
        let (h, w) = if side * side == m { (side, side) } else { (m, 1) };
        Self::new(y, h, w, provenance)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.y
    }

    pub fn patch_h(&self) -> usize {
        self.patch_h
    }

    pub fn patch_w(&self) -> usize {
        self.patch_w
    }

    pub fn m(&self) -> usize {
        self.y.nrows()
    }

    pub fn n(&self) -> usize {
        self.y.ncols()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    fn derived(&self, y: DMatrix<f64>, step: &str) -> Result<Self> {
        Self::new(y, self.patch_h, self.patch_w, format!("{}; {step}", self.provenance))
    }
}

/// Copies `count` square patches at uniformly drawn positions, scaling pixel
/// values to `[0, 1]`.
pub fn extract_patches(img: &GrayImage, size: usize, count: usize, seed: u64) -> Result<PatchDataset> {
    if size == 0 || size > img.height.min(img.width) {
        return Err(Error::Domain(format!(
            "patch size {size} does not fit a {}x{} image",
            img.height, img.width
        )));
    }
    if count == 0 {
        return Err(Error::Domain("patch count must be >= 1".into()));
    }
    let mut rng = seeding::rng(seed, Stream::Patches);
    let mut y = DMatrix::zeros(size * size, count);
    for mut col in y.column_iter_mut() {
        let r0 = rng.gen_range(0..=img.height - size);
        let c0 = rng.gen_range(0..=img.width - size);
        for dr in 0..size {
            let row = &img.pixels[(r0 + dr) * img.width + c0..][..size];
            for (dc, &px) in row.iter().enumerate() {
                col[dr * size + dc] = f64::from(px) / 255.0;
            }
        }
    }
    PatchDataset::new(
        y,
        size,
        size,
        format!("{count} random {size}x{size} patches, seed {seed}"),
    )
}

/// Subtracts each column's mean (its DC component).
pub fn remove_dc(ds: &PatchDataset) -> Result<PatchDataset> {
    let mut y = ds.y.clone();
    for mut col in y.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    ds.derived(y, "DC removed")
}

/// Removes the DC component and rescales every column to unit norm. Columns
/// that are constant are dropped; their number is returned.
pub fn center_and_normalize(ds: &PatchDataset) -> Result<(PatchDataset, usize)> {
    let mut kept = Vec::with_capacity(ds.n());
    for col in ds.y.column_iter() {
        let mut c = col.into_owned();
        let mean = c.mean();
        c.add_scalar_mut(-mean);
        let n = c.norm();
        if n >= DEGENERATE_NORM {
            kept.push(c / n);
        }
    }
    let dropped = ds.n() - kept.len();
    if kept.is_empty() {
        return Err(Error::Domain("every patch is constant; nothing left after centering".into()));
    }
    let y = DMatrix::from_columns(&kept);
    Ok((ds.derived(y, "centered and normalized")?, dropped))
}

/// PCA whitening `x ↦ W (x − mean)` with `W = Λ̃^{-1/2} Uᵀ`.
///
/// Rows of `W` are ordered by decreasing eigenvalue, so the first
/// `retained_dims` output coordinates are the ones not affected by the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    pub w: DMatrix<f64>,
    pub eps: f64,
    pub retained_dims: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WhiteningSidecar {
    mean: Vec<f64>,
    eps: f64,
    retained_dims: usize,
}

/// Unbiased sample covariance of the columns.
pub fn sample_covariance(y: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = y.ncols();
    let mean = y.column_mean();
    let mut centered = y.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let denom = n.saturating_sub(1).max(1) as f64;
    let cov = (&centered * centered.transpose()) / denom;
    (mean, cov)
}

pub fn fit_whitening(ds: &PatchDataset, eps: f64) -> Result<WhiteningTransform> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("eigenvalue floor must be positive, got {eps}")));
    }
    if ds.n() < 2 {
        return Err(Error::Domain("whitening needs at least two columns".into()));
    }
    if ds.n() < ds.m() {
        log::warn!("fitting whitening on {} columns of dimension {}", ds.n(), ds.m());
    }
    let (mean, cov) = sample_covariance(&ds.y);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..ds.m()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let lmax = eig.eigenvalues[order[0]].max(0.0);
    if lmax == 0.0 {
        return Err(Error::Domain("data has zero variance".into()));
    }
    let floor = eps * lmax;
    let mut w = DMatrix::zeros(ds.m(), ds.m());
    let mut retained = 0;
    for (row, &k) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda >= floor {
            retained += 1;
        }
        let scale = 1.0 / lambda.max(floor).sqrt();
        for (j, u) in eig.eigenvectors.column(k).iter().enumerate() {
            w[(row, j)] = scale * u;
        }
    }
    Ok(WhiteningTransform {
        mean,
        w,
        eps,
        retained_dims: retained,
    })
}

pub fn apply_whitening(ds: &PatchDataset, t: &WhiteningTransform) -> Result<PatchDataset> {
    if t.mean.len() != ds.m() || t.w.ncols() != ds.m() {
        return Err(Error::Dimension(format!(
            "transform expects dimension {}, dataset has {}",
            t.mean.len(),
            ds.m()
        )));
    }
    let mut centered = ds.y.clone();
    for mut col in centered.column_iter_mut() {
        col -= &t.mean;
    }
    ds.derived(&t.w * centered, "whitened")
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `W` to `path` and the remaining fields to `<path>.json`.
pub fn save_whitening(path: &Path, t: &WhiteningTransform) -> Result<()> {
    save_matrix(path, &t.w)?;
    let side = WhiteningSidecar {
        mean: t.mean.iter().copied().collect(),
        eps: t.eps,
        retained_dims: t.retained_dims,
    };
    fs::write(sidecar_path(path), serde_json::to_vec(&side)?)?;
    Ok(())
}

pub fn load_whitening(path: &Path) -> Result<WhiteningTransform> {
    let w = load_matrix(path)?;
    let side: WhiteningSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if side.mean.len() != w.ncols() {
        return Err(Error::Dimension("whitening mean and matrix disagree".into()));
    }
    Ok(WhiteningTransform {
        mean: DVector::from_vec(side.mean),
        w,
        eps: side.eps,
        retained_dims: side.retained_dims,
    })
}

/// Lays atoms out row-major on a grid, each one affinely stretched to the
/// full gray range; separators and empty cells are mid-gray.
pub fn render_mosaic(
    d: &DMatrix<f64>,
    atom_h: usize,
    atom_w: usize,
    grid_rows: usize,
    grid_cols: usize,
    pad: usize,
) -> Result<GrayImage> {
    if atom_h * atom_w != d.nrows() {
        return Err(Error::Dimension(format!(
            "{atom_h}x{atom_w} atoms need {} rows, dictionary has {}",
            atom_h * atom_w,
            d.nrows()
        )));
    }
    if grid_rows * grid_cols < d.ncols() {
        return Err(Error::Dimension(format!(
            "{grid_rows}x{grid_cols} grid cannot hold {} atoms",
            d.ncols()
        )));
    }
    let height = grid_rows * atom_h + (grid_rows + 1) * pad;
    let width = grid_cols * atom_w + (grid_cols + 1) * pad;
    let mut img = GrayImage::filled(height, width, 128);
    for (j, atom) in d.column_iter().enumerate() {
        let (lo, hi) = atom
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let top = pad + (j / grid_cols) * (atom_h + pad);
        let left = pad + (j % grid_cols) * (atom_w + pad);
        for r in 0..atom_h {
            for c in 0..atom_w {
                let v = atom[r * atom_w + c];
                let px = if hi > lo {
                    (255.0 * (v - lo) / (hi - lo)).round() as u8
                } else {
                    128
                };
                img.pixels[(top + r) * width + left + c] = px;
            }
        }
    }
    Ok(img)
}

/// A "dead leaves" image: overlapping opaque discs with log-uniform radii and
/// uniform gray levels, plus mild Gaussian noise. Its patches have the edge
/// and texture statistics that make dictionary learning meaningful without
/// needing a photo collection.
pub fn dead_leaves(height: usize, width: usize, seed: u64) -> GrayImage {
    let mut rng = seeding::rng(seed, Stream::Synthetic);
    let mut canvas = vec![128.0_f64; height * width];
    let r_min = 2.0_f64;
    let r_max = (height.min(width) as f64 / 4.0).max(r_min);
    let discs = 4 * height * width / 40;
    for _ in 0..discs {
        let cy = rng.gen_range(0.0..height as f64);
        let cx = rng.gen_range(0.0..width as f64);
        let r = r_min * (r_max / r_min).powf(rng.gen::<f64>());
        let level = rng.gen_range(0.0..255.0);
        let r0 = (cy - r).floor().max(0.0) as usize;
        let r1 = ((cy + r).ceil() as usize).min(height);
        let c0 = (cx - r).floor().max(0.0) as usize;
        let c1 = ((cx + r).ceil() as usize).min(width);
        for row in r0..r1 {
            for col in c0..c1 {
                let dy = row as f64 + 0.5 - cy;
                let dx = col as f64 + 0.5 - cx;
                if dy * dy + dx * dx <= r * r {
                    canvas[row * width + col] = level;
                }
            }
        }
    }
    let noise = Normal::new(0.0, 2.0).expect("valid standard deviation");
    let pixels = canvas
        .into_iter()
        .map(|v| (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage {
        height,
        width,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pgm_round_trip_and_comments() {
        let img = GrayImage::new(2, 3, vec![0, 1, 2, 253, 254, 255]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        let raw = b"P5 # comment\n3 # w\n2\n255\n\x00\x01\x02\xfd\xfe\xff";
        assert_eq!(decode_pgm(raw).unwrap(), img);
    }

    #[test]
    fn pgm_errors_carry_offsets() {
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x00"), Err(Error::Format { offset: 12, .. })));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::Format { offset: 7, .. })));
        assert!(matches!(decode_pgm(b"P5\nx"), Err(Error::Format { offset: 3, .. })));
    }

    #[test]
    fn matrix_format_layout() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..4], b"SSDL");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..16], 2u64.to_le_bytes());
        assert_eq!(bytes[16..24], 2u64.to_le_bytes());
        // column-major: 1, 3, 2, 4
        assert_eq!(bytes[32..40], 3.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 32);
    }

    #[test]
    fn matrix_format_errors() {
        assert!(matches!(decode_matrix(&[]), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode_matrix(&DMatrix::from_element(3, 5, 0.5));
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(decode_matrix(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = good.clone();
        bytes[4] = 2;
        assert!(matches!(decode_matrix(&bytes), Err(Error::Format { offset: 4, .. })));
        let cut = &good[..good.len() - 3];
        assert!(matches!(decode_matrix(cut), Err(Error::Format { offset, .. }) if offset == cut.len() as u64));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_matrix(&long), Err(Error::Format { offset, .. }) if offset == good.len() as u64));
        assert!(matches!(decode_matrix(&good[..10]), Err(Error::Format { offset: 10, .. })));
    }

    #[test]
    fn matrix_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = DMatrix::from_fn(3, 5, |_, _| rng.gen::<f64>() - 0.5);
        save_matrix(&path, &m).unwrap();
        assert_eq!(load_matrix(&path).unwrap(), m);
        fs::write(&path, b"").unwrap();
        assert!(matches!(load_matrix(&path), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn matrix_round_trip_is_bitwise(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(rows, cols, |_, _| f64::from_bits(rng.gen::<u64>() & 0x7fef_ffff_ffff_ffff));
            let back = decode_matrix(&encode_matrix(&m)).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            prop_assert!(back.iter().zip(m.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn normalized_columns_are_centered_unit(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = DMatrix::from_fn(9, 20, |_, _| rng.gen_range(0.0..1.0));
            let ds = PatchDataset::new(y, 3, 3, "random").unwrap();
            let (out, dropped) = center_and_normalize(&ds).unwrap();
            prop_assert_eq!(dropped, 0);
            for col in out.matrix().column_iter() {
                prop_assert!(col.mean().abs() <= 1e-12);
                prop_assert!((col.norm() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn mosaic_ignores_positive_rescaling(seed in any::<u64>(), k in -20i32..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = DMatrix::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
            let mut scaled = d.clone();
            scaled.column_mut(2).scale_mut(2f64.powi(k));
            prop_assert_eq!(render_mosaic(&d, 2, 2, 2, 3, 1).unwrap(), render_mosaic(&scaled, 2, 2, 2, 3, 1).unwrap());
        }
    }

    #[test]
    fn patches_of_constant_image() {
        let img = GrayImage::filled(10, 12, 128);
        let ds = extract_patches(&img, 4, 7, 1).unwrap();
        assert_eq!(ds.matrix().shape(), (16, 7));
        assert!(ds.matrix().iter().all(|&v| v == 128.0 / 255.0));
        assert!(extract_patches(&img, 11, 1, 0).is_err());
        assert!(extract_patches(&img, 4, 0, 0).is_err());
    }

    #[test]
    fn full_size_patch_is_the_image() {
        let img = GrayImage::new(2, 2, vec![0, 51, 102, 255]).unwrap();
        let ds = extract_patches(&img, 2, 3, 9).unwrap();
        for col in ds.matrix().column_iter() {
            assert_eq!(col.as_slice(), &[0.0, 0.2, 0.4, 1.0]);
        }
    }

    #[test]
    fn patch_sampling_is_seeded() {
        let img = dead_leaves(40, 40, 2);
        let a = extract_patches(&img, 5, 30, 4).unwrap();
        assert_eq!(a, extract_patches(&img, 5, 30, 4).unwrap());
        assert_ne!(a, extract_patches(&img, 5, 30, 5).unwrap());
        assert_eq!(dead_leaves(40, 40, 2), img);
    }

    #[test]
    fn normalization_examples() {
        let y = DMatrix::from_column_slice(2, 2, &[1.0, 3.0, 0.7, 0.7]);
        let ds = PatchDataset::new(y, 2, 1, "pair").unwrap();
        let (out, dropped) = center_and_normalize(&ds).unwrap();
        assert_eq!(dropped, 1);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out.matrix()[(0, 0)] + h).abs() < 1e-15 && (out.matrix()[(1, 0)] - h).abs() < 1e-15);
        let flat = PatchDataset::new(DMatrix::from_element(4, 3, 0.2), 2, 2, "flat").unwrap();
        assert!(center_and_normalize(&flat).is_err());
    }

    fn whitened_covariance_check(ds: &PatchDataset, eps: f64) -> WhiteningTransform {
        let t = fit_whitening(ds, eps).unwrap();
        let out = apply_whitening(ds, &t).unwrap();
        assert!(out.matrix().iter().all(|v| v.is_finite()));
        let (_, cov) = sample_covariance(out.matrix());
        for i in 0..t.retained_dims {
            for j in 0..t.retained_dims {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((cov[(i, j)] - expect).abs() <= 1e-6, "cov[{i},{j}] = {}", cov[(i, j)]);
            }
        }
        t
    }

    #[test]
    fn whitening_decorrelates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mix = DMatrix::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0));
        let z = DMatrix::from_fn(6, 400, |_, _| rng.gen_range(-1.0..1.0));
        let ds = PatchDataset::new(mix * z, 3, 2, "mixed").unwrap();
        let t = whitened_covariance_check(&ds, DEFAULT_WHITENING_EPS);
        assert_eq!(t.retained_dims, 6);
        let at_mean = PatchDataset::new(DMatrix::from_columns(&[t.mean.clone()]), 3, 2, "mean").unwrap();
        assert!(apply_whitening(&at_mean, &t).unwrap().matrix().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whitening_identity_covariance_is_orthogonal() {
        // ±1 Hadamard-style design: exact identity sample covariance
        let mut cols = Vec::new();
        for k in 0..16u32 {
            cols.push(DVector::from_fn(4, |i, _| if k >> i & 1 == 1 { 1.0 } else { -1.0 }));
        }
        let y = DMatrix::from_columns(&cols) * (15.0f64 / 16.0).sqrt();
        let ds = PatchDataset::new(y, 2, 2, "design").unwrap();
        let t = whitened_covariance_check(&ds, DEFAULT_WHITENING_EPS);
        let wwt = &t.w * t.w.transpose();
        assert!((wwt - DMatrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn whitening_rank_deficient_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = DMatrix::from_fn(4, 50, |_, _| rng.gen_range(0.0..1.0));
        let ds = remove_dc(&PatchDataset::new(y, 2, 2, "r").unwrap()).unwrap();
        let t = whitened_covariance_check(&ds, DEFAULT_WHITENING_EPS);
        assert_eq!(t.retained_dims, 3);
        assert!(t.w.iter().all(|v| v.is_finite()));

        let t = fit_whitening(&ds, 1.0).unwrap();
        let (_, cov) = sample_covariance(ds.matrix());
        let lmax = SymmetricEigen::new(cov).eigenvalues.max();
        let wwt = &t.w * t.w.transpose();
        assert!((wwt - DMatrix::identity(4, 4) / lmax).amax() < 1e-9);
        assert!(fit_whitening(&ds, 0.0).is_err());
        let one = PatchDataset::new(DMatrix::from_element(4, 1, 1.0), 2, 2, "one").unwrap();
        assert!(fit_whitening(&one, 1e-5).is_err());
    }

    #[test]
    fn whitening_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let y = DMatrix::from_fn(4, 30, |_, _| rng.gen::<f64>());
        let t = fit_whitening(&PatchDataset::new(y, 2, 2, "r").unwrap(), 1e-5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.bin");
        save_whitening(&path, &t).unwrap();
        assert_eq!(load_whitening(&path).unwrap(), t);
    }

    #[test]
    fn mosaic_examples() {
        let d = DMatrix::from_fn(4, 4, |i, j| (i + j) as f64);
        let img = render_mosaic(&d, 2, 2, 2, 2, 1).unwrap();
        assert_eq!((img.height(), img.width()), (7, 7));
        assert_eq!(img.get(0, 0), 128);
        assert_eq!((img.get(1, 1), img.get(2, 2)), (0, 255));

        let flat = DMatrix::from_element(9, 1, 0.3);
        let img = render_mosaic(&flat, 3, 3, 1, 1, 0).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 128));

        let sym = DMatrix::from_column_slice(4, 1, &[-0.5, 0.5, 0.0, 0.5]);
        let img = render_mosaic(&sym, 2, 2, 1, 1, 0).unwrap();
        assert_eq!(img.pixels(), &[0, 255, 128, 255]);

        let nine = DMatrix::from_fn(9, 9, |i, j| (i * j) as f64);
        let img = render_mosaic(&nine, 3, 3, 3, 3, 1).unwrap();
        assert_eq!((img.height(), img.width()), (13, 13));
        assert!(render_mosaic(&nine, 3, 3, 2, 4, 1).is_err());
        assert!(render_mosaic(&nine, 2, 4, 3, 3, 1).is_err());
    }
}
