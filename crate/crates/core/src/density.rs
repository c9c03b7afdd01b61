//! Ground-truth density maps from point annotations.
//!
//! Every annotated point contributes one copy of the same unit-mass Gaussian
//! stencil, whatever the size of the object it marks and however the sample
//! was cropped or scaled. Stencil cells falling outside the map are dropped
//! and the in-bounds remainder is rescaled so each point still carries mass
//! exactly one.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::image_io;
use crate::error::{Error, Result};
use crate::tensor::kernels::resize_bilinear_forward;
use crate::tensor::{Element, Shape, Tensor};

/// Head position in pixel units: `x` is the column, `y` the row, origin at
/// the top-left corner of the image. Pixel `(i, j)` covers `[j, j+1) x [i, i+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    /// `(row, col)` of the cell containing the point.
    pub fn cell(&self) -> (isize, isize) {
        (self.y.floor() as isize, self.x.floor() as isize)
    }

    pub fn inside(&self, h: usize, w: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < w as f64 && self.y < h as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub image_ref: String,
    pub points: Vec<Point>,
}

impl PointAnnotation {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        match self.points.iter().position(|p| !p.inside(h, w)) {
            None => Ok(()),
            Some(i) => {
                let p = self.points[i];
                Err(Error::Data(format!(
                    "{}: point {i} at ({}, {}) outside {w}x{h} image",
                    self.image_ref, p.x, p.y
                )))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianKernelSpec {
    /// Standard deviation in output pixels.
    pub sigma: f64,
    /// Stencil half-width; cells farther than this are omitted.
    pub radius: usize,
}

impl Default for GaussianKernelSpec {
    fn default() -> Self {
        GaussianKernelSpec {
            sigma: 2.0,
            radius: 6,
        }
    }
}

impl GaussianKernelSpec {
    /// Kernel with the smallest radius admissible for `sigma`.
    pub fn with_sigma(sigma: f64) -> Self {
        GaussianKernelSpec {
            sigma,
            radius: (3.0 * sigma).ceil().max(1.0) as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "gaussian sigma must be > 0, got {}",
                self.sigma
            )));
        }
        let min_radius = (3.0 * self.sigma).ceil() as usize;
        if self.radius < min_radius {
            return Err(Error::Config(format!(
                "truncation radius {} below ceil(3 sigma) = {min_radius}",
                self.radius
            )));
        }
        Ok(())
    }
}

/// `(2R+1)^2` unit-mass Gaussian weights, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    radius: usize,
    weights: Vec<f64>,
}

impl Stencil {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at offset `(dy, dx)` from the centre.
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }
}

pub fn make_kernel(spec: &GaussianKernelSpec) -> Result<Stencil> {
    spec.validate()?;
    let r = spec.radius as isize;
    let two_s2 = 2.0 * spec.sigma * spec.sigma;
    let mut weights = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            weights.push((-((dy * dy + dx * dx) as f64) / two_s2).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(Stencil {
        radius: spec.radius,
        weights,
    })
}

/// Single-channel non-negative map whose sum is the object count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    h: usize,
    w: usize,
    grid: Vec<f64>,
    kernel: GaussianKernelSpec,
}

impl DensityMap {
    pub fn zeros(h: usize, w: usize, kernel: GaussianKernelSpec) -> Self {
        DensityMap {
            h,
            w,
            grid: vec![0.0; h * w],
            kernel,
        }
    }

    pub fn from_grid(
        h: usize,
        w: usize,
        grid: Vec<f64>,
        kernel: GaussianKernelSpec,
    ) -> Result<Self> {
        if grid.len() != h * w || h == 0 || w == 0 {
            return Err(Error::shape(
                "density_map",
                format!("grid of {} values for {h}x{w}", grid.len()),
            ));
        }
        Ok(DensityMap { h, w, grid, kernel })
    }

    /// Reads plane (0, 0) of a tensor, dividing by `scale`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, scale: f64, kernel: GaussianKernelSpec) -> Self {
        let s = t.shape();
        DensityMap {
            h: s.h,
            w: s.w,
            grid: t.plane(0, 0).iter().map(|v| v.to_f64_lossy() / scale).collect(),
            kernel,
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn kernel_spec(&self) -> GaussianKernelSpec {
        self.kernel
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.w + col]
    }

    pub fn count(&self) -> f64 {
        self.grid.iter().sum()
    }

    /// `(1, 1, h, w)` tensor of the map multiplied by `scale`.
    pub fn to_tensor<T: Element>(&self, scale: f64) -> Tensor<T> {
        Tensor::from_vec(
            Shape::new(1, 1, self.h, self.w),
            self.grid.iter().map(|&v| T::from_f64_lossy(v * scale)).collect(),
        )
        .expect("grid length matches extents")
    }

    fn stamp(&mut self, stencil: &Stencil, row: isize, col: isize) {
        let r = stencil.radius as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        let y0 = (row - r).max(0);
        let y1 = (row + r).min(h - 1);
        let x0 = (col - r).max(0);
        let x1 = (col + r).min(w - 1);
        let interior = y0 == row - r && y1 == row + r && x0 == col - r && x1 == col + r;
        let scale = if interior {
            1.0
        } else {
            let mut inside = 0.0;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    inside += stencil.at(y - row, x - col);
                }
            }
            1.0 / inside
        };
        for y in y0..=y1 {
            let base = (y * w) as usize;
            for x in x0..=x1 {
                self.grid[base + x as usize] += stencil.at(y - row, x - col) * scale;
            }
        }
    }

    pub fn write_dmap(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(12 + 4 * self.grid.len());
        bytes.extend_from_slice(DMAP_MAGIC);
        bytes.extend_from_slice(&(self.h as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.w as u32).to_le_bytes());
        for &v in &self.grid {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a grid file. The kernel spec is not stored in the file and is
    /// set to `kernel`.
    pub fn read_dmap(path: &Path, kernel: GaussianKernelSpec) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..4] != DMAP_MAGIC {
            return Err(Error::Data(format!("{}: not a DMAP file", path.display())));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 4 * h * w {
            return Err(Error::Data(format!(
                "{}: payload length does not match {h}x{w}",
                path.display()
            )));
        }
        let grid = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        DensityMap::from_grid(h, w, grid, kernel)
    }

    /// Max-normalised 8-bit grayscale rendering.
    pub fn write_pgm_heatmap(&self, path: &Path) -> Result<()> {
        let peak = self.grid.iter().cloned().fold(0.0f64, f64::max);
        let pixels: Vec<u8> = self
            .grid
            .iter()
            .map(|&v| {
                if peak > 0.0 {
                    (v.max(0.0) / peak * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        image_io::write_gray8(path, self.w, self.h, pixels)
    }
}

const DMAP_MAGIC: &[u8; 4] = b"DMAP";

/// Stamps one stencil per point, centred on the cell containing it.
pub fn generate_density(
    points: &[Point],
    h: usize,
    w: usize,
    spec: &GaussianKernelSpec,
) -> Result<DensityMap> {
    let stencil = make_kernel(spec)?;
    generate_density_with(points, h, w, &stencil, *spec)
}

/// [`generate_density`] with a prebuilt stencil.
pub fn generate_density_with(
    points: &[Point],
    h: usize,
    w: usize,
    stencil: &Stencil,
    spec: GaussianKernelSpec,
) -> Result<DensityMap> {
    if h == 0 || w == 0 {
        return Err(Error::shape("generate_density", "map extents must be >= 1"));
    }
    let outside: Vec<String> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.inside(h, w))
        .map(|(i, p)| format!("#{i} ({}, {})", p.x, p.y))
        .collect();
    if !outside.is_empty() {
        return Err(Error::Data(format!(
            "points outside {w}x{h} map: {}",
            outside.join(", ")
        )));
    }
    let mut map = DensityMap::zeros(h, w, spec);
    for p in points {
        let (row, col) = p.cell();
        map.stamp(stencil, row, col);
    }
    Ok(map)
}

/// The offline augmentation pipeline: density built at full resolution,
/// then cropped, bilinearly rescaled and renormalised to the crop's count.
/// Scaling stretches every Gaussian along with the image, so the result no
/// longer carries the canonical stencil; it exists to exercise the audit.
pub fn crop_then_rescale_density(
    map: &DensityMap,
    origin: (usize, usize),
    side: usize,
    out_side: usize,
    retained_count: usize,
) -> Result<DensityMap> {
    let (oy, ox) = origin;
    if oy + side > map.h || ox + side > map.w || side == 0 || out_side == 0 {
        return Err(Error::shape(
            "crop_then_rescale_density",
            format!("crop {side} at {origin:?} outside {}x{}", map.h, map.w),
        ));
    }
    let mut crop = Vec::with_capacity(side * side);
    for y in oy..oy + side {
        crop.extend_from_slice(&map.grid[y * map.w + ox..y * map.w + ox + side]);
    }
    let t = Tensor::<f64>::from_vec(Shape::new(1, 1, side, side), crop)?;
    let scaled = resize_bilinear_forward(&t, out_side, out_side)?;
    let mass = scaled.sum();
    let factor = if mass > 0.0 {
        retained_count as f64 / mass
    } else {
        0.0
    };
    let grid = scaled.data().iter().map(|v| v * factor).collect();
    DensityMap::from_grid(out_side, out_side, grid, map.kernel)
}

/// Default threshold on the stencil deviation above which an audit flags
/// the map.
pub const AUDIT_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelAudit {
    pub max_abs_deviation: f64,
    pub threshold: f64,
}

impl KernelAudit {
    pub fn flagged(&self) -> bool {
        !(self.max_abs_deviation <= self.threshold)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("kernel audit inapplicable: {0}")]
pub struct AuditInapplicable(pub String);

/// Compares the patch around `points[target]` with the canonical stencil of
/// the map's kernel spec. The target must sit at least `3R` from every other
/// point and from every border.
pub fn audit_kernel_size(
    map: &DensityMap,
    points: &[Point],
    target: usize,
    threshold: f64,
) -> std::result::Result<KernelAudit, AuditInapplicable> {
    let p = *points
        .get(target)
        .ok_or_else(|| AuditInapplicable(format!("no point #{target}")))?;
    let stencil = make_kernel(&map.kernel).map_err(|e| AuditInapplicable(e.to_string()))?;
    let r = stencil.radius as isize;
    let margin = 3 * r;
    let (row, col) = p.cell();
    if row < margin
        || col < margin
        || row + margin > map.h as isize - 1
        || col + margin > map.w as isize - 1
    {
        return Err(AuditInapplicable(format!(
            "point #{target} closer than {margin} cells to a border"
        )));
    }
    for (i, q) in points.iter().enumerate() {
        if i == target {
            continue;
        }
        let (qr, qc) = q.cell();
        let d2 = ((qr - row).pow(2) + (qc - col).pow(2)) as f64;
        if d2 < (margin * margin) as f64 {
            return Err(AuditInapplicable(format!(
                "point #{i} within {margin} cells of point #{target}"
            )));
        }
    }
    let mut dev = 0.0f64;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = map.at((row + dy) as usize, (col + dx) as usize);
            dev = dev.max((v - stencil.at(dy, dx)).abs());
        }
    }
    Ok(KernelAudit {
        max_abs_deviation: dev,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_sigma_is_nearly_one_hot() {
        let s = make_kernel(&GaussianKernelSpec {
            sigma: 0.3,
            radius: 1,
        })
        .unwrap();
        assert!(s.at(0, 0) > 0.98);
        assert!(s.at(0, 1) < 0.005 && s.at(1, 1) < 1e-4);
    }

    #[test]
    fn stencil_has_unit_mass_and_symmetry() {
        let spec = GaussianKernelSpec {
            sigma: 2.0,
            radius: 6,
        };
        let s = make_kernel(&spec).unwrap();
        assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let max = s.weights().iter().cloned().fold(0.0, f64::max);
        assert_eq!(s.at(0, 0), max);
        for dy in -6..=6 {
            for dx in -6..=6 {
                let v = s.at(dy, dx);
                assert_eq!(v, s.at(-dy, dx));
                assert_eq!(v, s.at(dy, -dx));
                assert_eq!(v, s.at(dx, dy));
            }
        }
    }

    #[test]
    fn invalid_kernel_specs() {
        assert!(matches!(
            make_kernel(&GaussianKernelSpec { sigma: 0.0, radius: 3 }),
            Err(Error::Config(_))
        ));
        assert!(make_kernel(&GaussianKernelSpec { sigma: 2.0, radius: 5 }).is_err());
    }

    #[test]
    fn empty_points_give_zero_map() {
        let m = generate_density(&[], 16, 20, &GaussianKernelSpec::default()).unwrap();
        assert_eq!(m.count(), 0.0);
        assert!(m.grid().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_interior_point_has_unit_mass() {
        let m = generate_density(&[Point::new(20.3, 18.9)], 40, 40, &GaussianKernelSpec::default())
            .unwrap();
        assert!((m.count() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn border_points_are_renormalised() {
        let mut pts = Vec::new();
        for i in 0..25 {
            let t = i as f64;
            // some on edges and corners, some interior
            pts.push(Point::new((t * 7.3) % 48.0, if i % 3 == 0 { 0.2 } else { (t * 3.1) % 32.0 }));
        }
        let m = generate_density(&pts, 32, 48, &GaussianKernelSpec::default()).unwrap();
        assert!((m.count() - 25.0).abs() < 1e-3);
        assert!(m.grid().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn corner_point_keeps_unit_mass() {
        let m = generate_density(&[Point::new(0.0, 0.0)], 8, 8, &GaussianKernelSpec::default()).unwrap();
        assert!((m.count() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_point_is_listed() {
        let err = generate_density(&[Point::new(1.0, 1.0), Point::new(16.0, 2.0)], 16, 16, &GaussianKernelSpec::default())
            .unwrap_err();
        assert!(err.to_string().contains("#1 (16, 2)"), "{err}");
    }

    #[test]
    fn audit_passes_on_generated_map() {
        let pts = [Point::new(30.5, 30.5), Point::new(2.0, 2.0)];
        let m = generate_density(&pts, 64, 64, &GaussianKernelSpec::default()).unwrap();
        let a = audit_kernel_size(&m, &pts, 0, AUDIT_THRESHOLD).unwrap();
        assert!(a.max_abs_deviation < 1e-6);
        assert!(!a.flagged());
        // the corner point is too close to the border
        assert!(audit_kernel_size(&m, &pts, 1, AUDIT_THRESHOLD).is_err());
    }

    #[test]
    fn audit_flags_scale_then_normalize() {
        let pts = [Point::new(24.0, 24.0)];
        let m = generate_density(&pts, 48, 48, &GaussianKernelSpec::default()).unwrap();
        let scaled = crop_then_rescale_density(&m, (0, 0), 48, 96, 1).unwrap();
        let moved = [Point::new(48.0, 48.0)];
        let a = audit_kernel_size(&scaled, &moved, 0, AUDIT_THRESHOLD).unwrap();
        assert!(a.flagged(), "{a:?}");
    }

    #[test]
    fn audit_rejects_crowded_point() {
        let pts = [Point::new(40.0, 40.0), Point::new(45.0, 40.0)];
        let m = generate_density(&pts, 96, 96, &GaussianKernelSpec::default()).unwrap();
        assert!(audit_kernel_size(&m, &pts, 0, AUDIT_THRESHOLD).is_err());
    }

    #[test]
    fn dmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dmap");
        let pts = [Point::new(3.0, 4.0), Point::new(10.0, 2.0)];
        let m = generate_density(&pts, 12, 14, &GaussianKernelSpec::default()).unwrap();
        m.write_dmap(&path).unwrap();
        let back = DensityMap::read_dmap(&path, m.kernel_spec()).unwrap();
        assert_eq!((back.height(), back.width()), (12, 14));
        for (a, b) in back.grid().iter().zip(m.grid()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"DMAP");
        assert_eq!(bytes.len(), 12 + 4 * 12 * 14);
    }
}
