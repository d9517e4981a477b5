//! Two-sample statistics and visualization helpers used for evaluation:
//! unbiased RBF MMD^2, energy distance, a top-2 PCA projection, image grid
//! assembly, and a binary PGM writer.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::{median_bandwidth, RbfKernel};
use crate::tensor::Tensor;

/// Outcome of a two-sample kernel test.
#[derive(Debug, Clone, Copy)]
pub struct TwoSampleResult {
    pub statistic: f64,
    pub n: usize,
    pub m: usize,
    pub bandwidth: f64,
}

fn check_two_sample(a: &Tensor, b: &Tensor, min: usize, what: &'static str) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::shape(what, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() < min || b.rows() < min {
        return Err(Error::Contract(format!(
            "{what} needs at least {min} points per sample, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    Ok(())
}

/// Median-heuristic bandwidth over the pooled rows of both samples.
pub fn pooled_median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_two_sample(a, b, 1, "pooled_median_bandwidth")?;
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    let pooled = Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)?;
    median_bandwidth(&pooled)
}

/// Unbiased MMD^2 estimate (U-statistic on the within-sample terms); can be
/// slightly negative under the null.
pub fn mmd2_unbiased(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<TwoSampleResult> {
    check_two_sample(a, b, 2, "mmd2_unbiased")?;
    let kernel = RbfKernel::new(bandwidth)?;
    let (n, m) = (a.rows(), b.rows());

    let mut within_a = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                within_a += kernel.eval(a.row(i), a.row(j));
            }
        }
    }
    let mut within_b = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                within_b += kernel.eval(b.row(i), b.row(j));
            }
        }
    }
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += kernel.eval(a.row(i), b.row(j));
        }
    }
    let statistic = within_a / (n * (n - 1)) as f64 + within_b / (m * (m - 1)) as f64
        - 2.0 * cross / (n * m) as f64;
    Ok(TwoSampleResult { statistic, n, m, bandwidth })
}

/// Energy distance V-statistic: 2 E‖a-b‖ - E‖a-a'‖ - E‖b-b'‖, all means over
/// every ordered pair including the zero diagonal.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_two_sample(a, b, 1, "energy_distance")?;
    let dist = |p: &[f64], q: &[f64]| -> f64 {
        p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mean_pairwise = |x: &Tensor, y: &Tensor| -> f64 {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                s += dist(x.row(i), y.row(j));
            }
        }
        s / (x.rows() * y.rows()) as f64
    };
    Ok(2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b))
}

/// Top-2 PCA projection of row vectors.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// [n, 2] coordinates in the principal plane.
    pub coords: Tensor,
    /// Variance captured by each of the two components.
    pub explained: [f64; 2],
    /// Unit component directions, rows of a [2, d] tensor.
    pub components: Tensor,
    /// Set when the input has (numerically) no variance at all.
    pub degenerate: bool,
}

/// Projects rows onto their top-2 principal components via power iteration
/// with deflation. Component signs are fixed so the largest-magnitude entry
/// of each direction is positive.
pub fn pca_project(points: &Tensor) -> Result<PcaProjection> {
    if points.shape().len() != 2 || points.rows() < 2 || points.cols() < 2 {
        return Err(Error::shape("pca_project", format!("{:?}", points.shape())));
    }
    let (n, d) = (points.rows(), points.cols());

    let mut means = vec![0.0; d];
    for i in 0..n {
        for (c, m) in points.row(i).iter().zip(means.iter_mut()) {
            *m += c;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut centered = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            centered[i * d + j] = points.row(i)[j] - means[j];
        }
    }

    // Sample covariance, d x d.
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = &centered[r * d..(r + 1) * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for v in &mut cov {
        *v /= (n - 1) as f64;
    }
    let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if total_var <= 1e-24 {
        return Ok(PcaProjection {
            coords: Tensor::zeros(vec![n, 2]),
            explained: [0.0, 0.0],
            components: Tensor::zeros(vec![2, d]),
            degenerate: true,
        });
    }

    let mat_vec = |m: &[f64], v: &[f64]| -> Vec<f64> {
        (0..d).map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum()).collect()
    };
    let normalize = |v: &mut [f64]| -> f64 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        norm
    };

    let mut components = Vec::with_capacity(2 * d);
    let mut explained = [0.0; 2];
    let mut deflated = cov.clone();
    for comp in 0..2 {
        // Deterministic pseudo-random start so runs are reproducible.
        let mut v: Vec<f64> = (0..d)
            .map(|j| {
                let mut s = (j as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(comp as u64);
                s ^= s >> 27;
                s = s.wrapping_mul(0x94d0_49bb_1331_11eb);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        normalize(&mut v);
        for _ in 0..300 {
            let mut next = mat_vec(&deflated, &v);
            // Re-orthogonalize against earlier components.
            for prev in 0..comp {
                let p = &components[prev * d..(prev + 1) * d];
                let dot: f64 = next.iter().zip(p).map(|(a, b)| a * b).sum();
                for (x, pv) in next.iter_mut().zip(p) {
                    *x -= dot * pv;
                }
            }
            // A vanishing image means no variance is left in this subspace.
            if normalize(&mut next) < total_var * 1e-18 {
                break;
            }
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < 1e-14 {
                break;
            }
        }
        let cv = mat_vec(&deflated, &v);
        let lambda: f64 = v.iter().zip(&cv).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        let argmax = (0..d).max_by(|&i, &j| v[i].abs().total_cmp(&v[j].abs())).unwrap();
        if v[argmax] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        for i in 0..d {
            for j in 0..d {
                deflated[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        explained[comp] = lambda;
        components.extend_from_slice(&v);
    }

    let mut coords = vec![0.0; n * 2];
    for r in 0..n {
        let row = &centered[r * d..(r + 1) * d];
        for comp in 0..2 {
            let c = &components[comp * d..(comp + 1) * d];
            coords[r * 2 + comp] = row.iter().zip(c).map(|(a, b)| a * b).sum();
        }
    }
    Ok(PcaProjection {
        coords: Tensor::new(vec![n, 2], coords)?,
        explained,
        components: Tensor::new(vec![2, d], components)?,
        degenerate: false,
    })
}

/// A grayscale raster with values in [0, 1].
#[derive(Debug, Clone)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

/// Lays out image rows (one flattened image per tensor row) into a
/// rows x cols grid with 1-pixel 0.5 separators between tiles. Missing
/// tiles stay black.
pub fn image_grid(
    images: &Tensor,
    img_h: usize,
    img_w: usize,
    grid_rows: usize,
    grid_cols: usize,
) -> Result<GrayImage> {
    if images.shape().len() != 2 || images.cols() != img_h * img_w {
        return Err(Error::shape(
            "image_grid",
            format!("{:?} for {img_h}x{img_w} tiles", images.shape()),
        ));
    }
    if grid_rows == 0 || grid_cols == 0 {
        return Err(Error::Contract("image_grid needs a nonempty grid".to_string()));
    }
    if images.rows() > grid_rows * grid_cols {
        return Err(Error::Contract(format!(
            "{} images do not fit a {grid_rows}x{grid_cols} grid",
            images.rows()
        )));
    }
    let height = grid_rows * img_h + (grid_rows - 1);
    let width = grid_cols * img_w + (grid_cols - 1);
    let mut pixels = vec![0.0; height * width];
    // Separator rows and columns.
    for gr in 1..grid_rows {
        let y = gr * (img_h + 1) - 1;
        for x in 0..width {
            pixels[y * width + x] = 0.5;
        }
    }
    for gc in 1..grid_cols {
        let x = gc * (img_w + 1) - 1;
        for y in 0..height {
            pixels[y * width + x] = 0.5;
        }
    }
    for (t, img) in (0..images.rows()).map(|t| (t, images.row(t))) {
        let (gr, gc) = (t / grid_cols, t % grid_cols);
        let (y0, x0) = (gr * (img_h + 1), gc * (img_w + 1));
        for r in 0..img_h {
            for c in 0..img_w {
                pixels[(y0 + r) * width + (x0 + c)] = img[r * img_w + c];
            }
        }
    }
    Ok(GrayImage { width, height, pixels })
}

/// Writes a binary PGM (P5, maxval 255); values are clamped to [0, 1] and
/// scaled by 255 with rounding.
pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    if image.pixels.len() != image.width * image.height {
        return Err(Error::shape(
            "write_pgm",
            format!("{} pixels for {}x{}", image.pixels.len(), image.width, image.height),
        ));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend(image.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}
