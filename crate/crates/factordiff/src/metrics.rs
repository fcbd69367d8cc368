//! Reconstruction and disentanglement evaluation.
//!
//! Reconstruction quality is pixel MSE/PSNR in 8-bit units. Disentanglement
//! compares latent codes against discrete ground-truth factors with two
//! standard scores on the 0-100 scale: the mutual information gap (MIG, from
//! 20-bin equal-width discretization with plugin entropies) and the mean
//! correlation coefficient (MCC, absolute Pearson correlations matched by a
//! maximum-weight one-to-one assignment). A PCA projection reduces wide
//! latents first when needed. Sprite oracles (connected-component counting
//! and template-correlation shape classification) score generated scenes
//! against generator metadata without any learned machinery.

use ndarray::{Array2, ArrayView, ArrayView2, ArrayView3, Dimension};

use crate::datasets::{pixel_coverage, ShapeKind};
use crate::error::{Error, Result};

/// Equal-width bins per latent dimension for mutual information estimates.
pub const MI_BINS: usize = 20;

/// Foreground threshold above the background level, in [0, 1] display units.
const FG_THRESHOLD: f32 = 0.1;
/// Components smaller than this many pixels are noise, not sprites.
const MIN_SPRITE_AREA: usize = 6;
/// Eigenvalues below this fraction of the largest count as rank-deficient.
const RANK_EPS: f64 = 1e-10;

/// Disentanglement scores with the evidence they were computed from.
#[derive(Clone, Debug)]
pub struct DisentanglementReport {
    /// Mutual information gap, 0-100.
    pub mig: f64,
    /// Mean correlation coefficient, 0-100.
    pub mcc: f64,
    /// Mutual information in nats between each latent dimension (row) and
    /// each factor (column).
    pub mi: Array2<f64>,
    /// Absolute Pearson correlation per (latent dimension, factor).
    pub correlation: Array2<f64>,
    /// One-to-one (latent dimension, factor) pairs behind the MCC score,
    /// sorted by factor.
    pub assignment: Vec<(usize, usize)>,
    /// Degenerate inputs noticed along the way (constant dimensions or
    /// factors).
    pub warnings: Vec<String>,
}

/// Pixel MSE in 8-bit units plus PSNR, over any pair of equal-shaped
/// tensors in [-1, 1]. PSNR is capped at 100 dB so identical inputs stay
/// finite.
pub fn mse_psnr<D: Dimension>(a: ArrayView<f32, D>, b: ArrayView<f32, D>) -> Result<(f64, f64)> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Argument("cannot score empty tensors".into()));
    }
    // One 8-bit level equals 2/255 in [-1, 1] units, so differences scale
    // by 127.5 to land in [0, 255] units.
    let mut sum = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (*x as f64 - *y as f64) * 127.5;
        sum += d * d;
    }
    let mse = sum / a.len() as f64;
    let psnr = if mse == 0.0 { 100.0 } else { (10.0 * (255.0f64 * 255.0 / mse).log10()).min(100.0) };
    Ok((mse, psnr))
}

fn check_latent_factor_shapes(
    latents: &ArrayView2<'_, f32>,
    factors: &ArrayView2<'_, u32>,
) -> Result<()> {
    let (n, d) = latents.dim();
    let (nf, f) = factors.dim();
    if n == 0 || d == 0 || f == 0 {
        return Err(Error::Argument(format!(
            "latents [{n}, {d}] and factors [{nf}, {f}] must be non-empty"
        )));
    }
    if n != nf {
        return Err(Error::Argument(format!(
            "latents have {n} rows but factors have {nf}"
        )));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("latents contain non-finite values".into()));
    }
    Ok(())
}

/// Equal-width bin index per sample, or None for a constant dimension.
fn bin_column(col: &[f64], bins: usize) -> Option<Vec<usize>> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in col {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return None;
    }
    let scale = bins as f64 / (hi - lo);
    Some(
        col.iter()
            .map(|&v| (((v - lo) * scale) as usize).min(bins - 1))
            .collect(),
    )
}

/// Plugin entropy of a discrete sample in nats.
fn entropy(values: &[usize], card: usize) -> f64 {
    let mut counts = vec![0usize; card];
    for &v in values {
        counts[v] += 1;
    }
    let n = values.len() as f64;
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plugin mutual information in nats between two discrete samples.
fn mutual_info(a: &[usize], ca: usize, b: &[usize], cb: usize) -> f64 {
    let n = a.len();
    let mut joint = vec![0usize; ca * cb];
    let mut ma = vec![0usize; ca];
    let mut mb = vec![0usize; cb];
    for i in 0..n {
        joint[a[i] * cb + b[i]] += 1;
        ma[a[i]] += 1;
        mb[b[i]] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for ia in 0..ca {
        for ib in 0..cb {
            let c = joint[ia * cb + ib];
            if c == 0 {
                continue;
            }
            let p = c as f64 / nf;
            mi += p * (p * nf * nf / (ma[ia] as f64 * mb[ib] as f64)).ln();
        }
    }
    mi.max(0.0)
}

struct MiTable {
    /// [D, F] mutual information in nats; constant latent dimensions score 0.
    mi: Array2<f64>,
    /// Plugin entropy per factor.
    factor_entropy: Vec<f64>,
    warnings: Vec<String>,
}

fn mi_table(
    latents: &ArrayView2<'_, f32>,
    factors: &ArrayView2<'_, u32>,
    bins: usize,
) -> MiTable {
    let (n, d) = latents.dim();
    let f = factors.dim().1;
    let mut warnings = Vec::new();

    let binned: Vec<Option<Vec<usize>>> = (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| latents[[i, j]] as f64).collect();
            let b = bin_column(&col, bins);
            if b.is_none() {
                warnings.push(format!("latent dimension {j} is constant; its MI is 0"));
            }
            b
        })
        .collect();

    let mut mi = Array2::zeros((d, f));
    let mut factor_entropy = vec![0.0; f];
    for vf in 0..f {
        let col: Vec<usize> = (0..n).map(|i| factors[[i, vf]] as usize).collect();
        let card = col.iter().max().copied().unwrap_or(0) + 1;
        factor_entropy[vf] = entropy(&col, card);
        if factor_entropy[vf] == 0.0 {
            warnings.push(format!("factor {vf} is constant; skipped"));
            continue;
        }
        for (j, zb) in binned.iter().enumerate() {
            if let Some(zb) = zb {
                mi[[j, vf]] = mutual_info(zb, bins, &col, card);
            }
        }
    }
    MiTable { mi, factor_entropy, warnings }
}

fn mig_from_table(table: &MiTable) -> f64 {
    let (d, f) = table.mi.dim();
    let mut total = 0.0;
    let mut counted = 0usize;
    for vf in 0..f {
        let h = table.factor_entropy[vf];
        if h == 0.0 {
            continue;
        }
        let mut top1 = 0.0f64;
        let mut top2 = 0.0f64;
        for j in 0..d {
            let m = table.mi[[j, vf]];
            if m > top1 {
                top2 = top1;
                top1 = m;
            } else if m > top2 {
                top2 = m;
            }
        }
        total += (top1 - top2) / h;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        100.0 * total / counted as f64
    }
}

/// Mutual information gap on the 0-100 scale with a caller-chosen bin count.
pub fn mig_binned(
    latents: ArrayView2<'_, f32>,
    factors: ArrayView2<'_, u32>,
    bins: usize,
) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Argument(format!("bin count must be at least 2, got {bins}")));
    }
    check_latent_factor_shapes(&latents, &factors)?;
    Ok(mig_from_table(&mi_table(&latents, &factors, bins)))
}

/// Mutual information gap: mean over factors of the normalized gap between
/// the two largest latent-factor mutual informations, times 100.
pub fn mig(latents: ArrayView2<'_, f32>, factors: ArrayView2<'_, u32>) -> Result<f64> {
    mig_binned(latents, factors, MI_BINS)
}

/// |Pearson correlation| per (latent dimension, factor); zero-variance
/// columns correlate 0 by definition.
fn correlation_table(latents: &ArrayView2<'_, f32>, factors: &ArrayView2<'_, u32>) -> Array2<f64> {
    let (n, d) = latents.dim();
    let f = factors.dim().1;
    let nf = n as f64;

    let zcols: Vec<(Vec<f64>, f64)> = (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| latents[[i, j]] as f64).collect();
            let mean = col.iter().sum::<f64>() / nf;
            let centered: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
            (centered, norm)
        })
        .collect();
    let vcols: Vec<(Vec<f64>, f64)> = (0..f)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| factors[[i, j]] as f64).collect();
            let mean = col.iter().sum::<f64>() / nf;
            let centered: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
            (centered, norm)
        })
        .collect();

    let mut corr = Array2::zeros((d, f));
    for j in 0..d {
        for vf in 0..f {
            let (z, zn) = &zcols[j];
            let (v, vn) = &vcols[vf];
            if *zn == 0.0 || *vn == 0.0 {
                continue;
            }
            let dot: f64 = z.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            corr[[j, vf]] = (dot / (zn * vn)).abs().min(1.0);
        }
    }
    corr
}

/// Maximum-weight perfect assignment on a square non-negative matrix via
/// shortest augmenting paths over potentials. Returns the column matched to
/// each row.
fn hungarian_max(w: &Array2<f64>) -> Vec<usize> {
    let n = w.nrows();
    assert_eq!(n, w.ncols(), "assignment needs a square matrix");
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = -w[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

/// Matched (latent, factor) pairs maximizing total |correlation|, restricted
/// to real (unpadded) pairs and sorted by factor.
fn best_assignment(corr: &Array2<f64>) -> Vec<(usize, usize)> {
    let (d, f) = corr.dim();
    let n = d.max(f);
    let mut padded = Array2::zeros((n, n));
    for j in 0..d {
        for vf in 0..f {
            padded[[j, vf]] = corr[[j, vf]];
        }
    }
    let row_to_col = hungarian_max(&padded);
    let mut pairs: Vec<(usize, usize)> = row_to_col
        .iter()
        .enumerate()
        .filter(|(i, j)| *i < d && **j < f)
        .map(|(i, j)| (i, *j))
        .collect();
    pairs.sort_by_key(|p| p.1);
    pairs
}

/// Mean correlation coefficient: 100 times the mean of the matched absolute
/// Pearson correlations under the best one-to-one latent-factor assignment.
pub fn mcc(latents: ArrayView2<'_, f32>, factors: ArrayView2<'_, u32>) -> Result<f64> {
    check_latent_factor_shapes(&latents, &factors)?;
    let corr = correlation_table(&latents, &factors);
    let pairs = best_assignment(&corr);
    let denom = corr.nrows().min(corr.ncols()) as f64;
    Ok(100.0 * pairs.iter().map(|(i, j)| corr[[*i, *j]]).sum::<f64>() / denom)
}

/// Compute MIG and MCC together with the tables behind them.
pub fn disentanglement_report(
    latents: ArrayView2<'_, f32>,
    factors: ArrayView2<'_, u32>,
) -> Result<DisentanglementReport> {
    check_latent_factor_shapes(&latents, &factors)?;
    let table = mi_table(&latents, &factors, MI_BINS);
    let corr = correlation_table(&latents, &factors);
    let assignment = best_assignment(&corr);
    let denom = corr.nrows().min(corr.ncols()) as f64;
    let mcc = 100.0 * assignment.iter().map(|(i, j)| corr[[*i, *j]]).sum::<f64>() / denom;
    Ok(DisentanglementReport {
        mig: mig_from_table(&table),
        mcc,
        mi: table.mi,
        correlation: corr,
        assignment,
        warnings: table.warnings,
    })
}

/// A centered PCA projection with the evidence needed to audit it.
#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// [N, d] coordinates in the principal basis.
    pub projected: Array2<f32>,
    /// [D, d] orthonormal loading columns; zero columns pad past the rank.
    pub components: Array2<f64>,
    /// All D population-covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Per-dimension mean removed before projecting.
    pub mean: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Project latents onto their top-d principal components by explained
/// variance. Each component's largest-magnitude loading is made positive so
/// the basis is deterministic.
pub fn pca_project(latents: ArrayView2<'_, f32>, d: usize) -> Result<PcaProjection> {
    let (n, dim) = latents.dim();
    if n == 0 || dim == 0 {
        return Err(Error::Argument("latents must be non-empty".into()));
    }
    if d == 0 || d > dim {
        return Err(Error::Argument(format!(
            "projection dimension must lie in 1..={dim}, got {d}"
        )));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("latents contain non-finite values".into()));
    }

    let nf = n as f64;
    let mean: Vec<f64> =
        (0..dim).map(|j| (0..n).map(|i| latents[[i, j]] as f64).sum::<f64>() / nf).collect();
    let mut centered = nalgebra::DMatrix::<f64>::zeros(n, dim);
    for i in 0..n {
        for j in 0..dim {
            centered[(i, j)] = latents[[i, j]] as f64 - mean[j];
        }
    }
    let cov = centered.transpose() * &centered / nf;
    let eig = nalgebra::SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let eigenvalues: Vec<f64> = order.iter().map(|i| eig.eigenvalues[*i].max(0.0)).collect();

    let lead = eigenvalues[0];
    let rank = eigenvalues.iter().filter(|l| **l > RANK_EPS * lead.max(RANK_EPS)).count();
    let mut warnings = Vec::new();
    if d > rank {
        warnings.push(format!(
            "requested {d} components but the data has rank {rank}; extra columns are zero"
        ));
    }

    let mut components = Array2::zeros((dim, d));
    for (c, &src) in order.iter().take(d.min(rank)).enumerate() {
        let col = eig.eigenvectors.column(src);
        // Deterministic sign: the largest-magnitude loading is positive.
        let mut arg = 0usize;
        for r in 1..dim {
            if col[r].abs() > col[arg].abs() {
                arg = r;
            }
        }
        let sign = if col[arg] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..dim {
            components[[r, c]] = col[r] * sign;
        }
    }

    let mut projected = Array2::zeros((n, d));
    for i in 0..n {
        for c in 0..d {
            let mut acc = 0.0f64;
            for r in 0..dim {
                acc += centered[(i, r)] * components[[r, c]];
            }
            projected[[i, c]] = acc as f32;
        }
    }

    Ok(PcaProjection { projected, components, eigenvalues, mean, warnings })
}

struct Component {
    /// Scanline-ordered pixel list as (y, x).
    pixels: Vec<(usize, usize)>,
    /// Display-space excess over the background per pixel, parallel to
    /// `pixels`. Anti-aliasing makes this proportional to silhouette
    /// coverage, which is what the shape classifier matches on.
    values: Vec<f32>,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    /// Largest excess inside the component, approximately the sprite
    /// color's brightest channel.
    peak_excess: f32,
}

/// Foreground components of a sprite-style image: pixels brighter than the
/// per-channel median background by the threshold in any channel,
/// 8-connected, at least MIN_SPRITE_AREA pixels.
fn foreground_components(image: &ArrayView3<'_, f32>) -> Vec<Component> {
    let (c, h, w) = image.dim();
    if c == 0 || h == 0 || w == 0 {
        return Vec::new();
    }
    // Median of each channel estimates the background level even when
    // sprites or noise perturb it.
    let mut bg = vec![0.0f32; c];
    let mut scratch: Vec<f32> = Vec::with_capacity(h * w);
    for ch in 0..c {
        scratch.clear();
        scratch.extend(image.index_axis(ndarray::Axis(0), ch).iter().copied());
        scratch.sort_by(f32::total_cmp);
        bg[ch] = scratch[scratch.len() / 2];
    }

    let mut excess = vec![0.0f32; h * w];
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let e = (0..c)
                .map(|ch| (image[[ch, y, x]] - bg[ch]) * 0.5)
                .fold(0.0f32, f32::max);
            excess[y * w + x] = e;
            mask[y * w + x] = e > FG_THRESHOLD;
        }
    }

    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
        let mut peak_excess = 0.0f32;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            pixels.push((y, x));
            peak_excess = peak_excess.max(excess[p]);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if pixels.len() >= MIN_SPRITE_AREA {
            pixels.sort();
            let values = pixels.iter().map(|(y, x)| excess[y * w + x]).collect();
            out.push(Component { pixels, values, y0, y1, x0, x1, peak_excess });
        }
    }
    // Scanline order by first pixel keeps output deterministic.
    out.sort_by_key(|comp| comp.pixels[0]);
    out
}

/// Count sprite-like foreground components; blank images return 0.
pub fn count_sprites(image: ArrayView3<'_, f32>) -> usize {
    foreground_components(&image).len()
}

/// Silhouette area as a multiple of the squared circumscribed radius, used
/// to recover the radius from observed coverage mass (anti-aliasing
/// preserves area).
fn silhouette_area_factor(shape: ShapeKind) -> f32 {
    match shape {
        ShapeKind::Circle => std::f32::consts::PI,
        // Half-side 0.82 r.
        ShapeKind::Square => (2.0 * 0.82) * (2.0 * 0.82),
        // Equilateral with circumradius r.
        ShapeKind::Triangle => 3.0 * 3.0f32.sqrt() / 4.0,
        // Two 2r x 0.7r bars minus their overlap.
        ShapeKind::Cross => 2.0 * (2.0 * 0.7) - 0.7 * 0.7,
    }
}

fn classify_component(comp: &Component) -> ShapeKind {
    let h = comp.y1 - comp.y0 + 1;
    let w = comp.x1 - comp.x0 + 1;
    // Binarized masks of different silhouettes collapse to the same pixels
    // at small radii, so the match is on continuous coverage instead:
    // pixel excess divided by the peak recovers the anti-aliased coverage
    // the renderer wrote down.
    let peak = comp.peak_excess.max(1e-6);
    let co: Vec<f32> = comp.values.iter().map(|e| (e / peak).min(1.0)).collect();
    let co2: f32 = co.iter().map(|v| v * v).sum();
    let mass: f32 = co.iter().sum();
    // Every silhouette's centroid coincides with its circumcenter, so the
    // coverage-weighted centroid aligns templates with subpixel accuracy.
    let cyo = comp
        .pixels
        .iter()
        .zip(&co)
        .map(|(p, c)| (p.0 as f32 + 0.5) * c)
        .sum::<f32>()
        / mass;
    let cxo = comp
        .pixels
        .iter()
        .zip(&co)
        .map(|(p, c)| (p.1 as f32 + 0.5) * c)
        .sum::<f32>()
        / mass;
    // Evaluate on the bounding box plus a margin so oversized template
    // guesses are penalized rather than cropped.
    let pad = 2usize;

    let mut best = ShapeKind::Circle;
    let mut best_score = f32::NEG_INFINITY;
    for shape in ShapeKind::ALL {
        let r0 = (mass / silhouette_area_factor(shape)).sqrt();
        // Threshold clipping nibbles a little mass off the rim; a small
        // radius scan absorbs the bias.
        for scale in [0.96f32, 1.0, 1.04] {
            let r = r0 * scale;
            // Scan frame origin sits pad pixels above and left of the bbox.
            let cx = cxo - comp.x0 as f32 + pad as f32;
            let cy = cyo - comp.y0 as f32 + pad as f32;
            let mut dot = 0.0f32;
            let mut t2 = 0.0f32;
            for y in 0..h + 2 * pad {
                for x in 0..w + 2 * pad {
                    let ct = pixel_coverage(shape, x, y, cx, cy, r);
                    if ct == 0.0 {
                        continue;
                    }
                    t2 += ct * ct;
                    let iy = (y + comp.y0).checked_sub(pad);
                    let ix = (x + comp.x0).checked_sub(pad);
                    if let (Some(iy), Some(ix)) = (iy, ix) {
                        if let Ok(idx) = comp.pixels.binary_search(&(iy, ix)) {
                            dot += ct * co[idx];
                        }
                    }
                }
            }
            let score = if t2 > 0.0 { dot / (t2 * co2).sqrt() } else { f32::NEG_INFINITY };
            if score > best_score {
                best_score = score;
                best = shape;
            }
        }
    }
    best
}

/// Classify each foreground component against the sprite silhouette
/// vocabulary by template correlation. Components appear in scanline order
/// of their first pixel; degenerate images return an empty list.
pub fn classify_shapes(image: ArrayView3<'_, f32>) -> Vec<ShapeKind> {
    foreground_components(&image).iter().map(classify_component).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_global_dataset, gen_sprite_dataset, GlobalSceneConfig, SceneRecord, SpriteSceneConfig};
    use ndarray::{Array3, Array4, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn uniform_factors(n: usize, cards: &[u32], seed: u64) -> Array2<u32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut out = Array2::zeros((n, cards.len()));
        for i in 0..n {
            for (j, c) in cards.iter().enumerate() {
                out[[i, j]] = rng.gen_range(0..*c);
            }
        }
        out
    }

    #[test]
    fn mse_psnr_units_and_caps() {
        let a = Array3::from_elem((3, 4, 4), 0.25f32);
        let (mse, psnr) = mse_psnr(a.view(), a.view()).unwrap();
        assert_eq!(mse, 0.0);
        assert_eq!(psnr, 100.0);

        // One 8-bit level is 2/255 in [-1, 1] units and must cost MSE 1.
        let b = a.mapv(|v| v + 2.0 / 255.0);
        let (mse, psnr) = mse_psnr(a.view(), b.view()).unwrap();
        assert!((mse - 1.0).abs() < 1e-3, "one-level mse {mse}");
        assert!((psnr - 10.0 * (255.0f64 * 255.0).log10()).abs() < 1e-2);

        let c = Array3::from_elem((3, 4, 5), 0.25f32);
        assert_eq!(mse_psnr(a.view(), c.view()).unwrap_err().category(), "argument");
    }

    #[test]
    fn factor_copies_score_near_perfect_mig() {
        let n = 10_000;
        let cards = [5u32, 6, 6, 4];
        let factors = uniform_factors(n, &cards, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut latents = Array2::zeros((n, 8));
        for i in 0..n {
            for f in 0..4 {
                latents[[i, f]] = factors[[i, f]] as f32;
            }
            for j in 4..8 {
                latents[[i, j]] = rng.sample::<f32, _>(StandardNormal);
            }
        }
        let score = mig(latents.view(), factors.view()).unwrap();
        assert!(score >= 95.0, "mig {score}");
        let m = mcc(latents.view(), factors.view()).unwrap();
        assert!(m >= 99.0, "mcc {m}");
    }

    #[test]
    fn independent_latents_score_near_zero() {
        let n = 10_000;
        let factors = uniform_factors(n, &[5, 6, 6, 4], 3);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let latents =
            Array2::from_shape_simple_fn((n, 8), || rng.sample::<f32, _>(StandardNormal));
        let g = mig(latents.view(), factors.view()).unwrap();
        assert!(g < 5.0, "mig {g}");
        let m = mcc(latents.view(), factors.view()).unwrap();
        assert!(m < 10.0, "mcc {m}");
    }

    #[test]
    fn permuted_and_negated_factors_give_full_mcc() {
        let n = 2_000;
        let factors = uniform_factors(n, &[5, 6, 6, 4], 5);
        let perm = [2usize, 0, 3, 1];
        let sign = [1.0f32, -1.0, -1.0, 1.0];
        let mut latents = Array2::zeros((n, 4));
        for i in 0..n {
            for (j, &src) in perm.iter().enumerate() {
                latents[[i, j]] = sign[j] * factors[[i, src]] as f32;
            }
        }
        let m = mcc(latents.view(), factors.view()).unwrap();
        assert!(m > 100.0 - 1e-6, "mcc {m}");

        let report = disentanglement_report(latents.view(), factors.view()).unwrap();
        let mut matched: Vec<(usize, usize)> = report.assignment.clone();
        matched.sort_by_key(|p| p.0);
        assert_eq!(matched, vec![(0, 2), (1, 0), (2, 3), (3, 1)]);
    }

    #[test]
    fn scores_are_invariant_to_positive_affine_latent_maps() {
        let n = 4_000;
        let factors = uniform_factors(n, &[5, 6, 4], 6);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut latents = Array2::zeros((n, 6));
        for i in 0..n {
            for f in 0..3 {
                latents[[i, f]] =
                    factors[[i, f]] as f32 + 0.3 * rng.sample::<f32, _>(StandardNormal);
            }
            for j in 3..6 {
                latents[[i, j]] = rng.sample::<f32, _>(StandardNormal);
            }
        }
        let g0 = mig(latents.view(), factors.view()).unwrap();
        let m0 = mcc(latents.view(), factors.view()).unwrap();

        let mut mapped = latents.clone();
        for j in 0..6 {
            let a = rng.gen_range(0.2f32..5.0);
            let b = rng.gen_range(-3.0f32..3.0);
            for i in 0..n {
                mapped[[i, j]] = a * mapped[[i, j]] + b;
            }
        }
        let g1 = mig(mapped.view(), factors.view()).unwrap();
        let m1 = mcc(mapped.view(), factors.view()).unwrap();
        // Binning can shift single samples across bin edges in float, so the
        // MIG tolerance is loose while Pearson is affine-exact.
        assert!((g0 - g1).abs() < 0.5, "mig moved {g0} -> {g1}");
        assert!((m0 - m1).abs() < 1e-6, "mcc moved {m0} -> {m1}");
    }

    #[test]
    fn degenerate_columns_warn_and_score_zero() {
        let n = 500;
        let factors = uniform_factors(n, &[4, 1], 8);
        let mut latents = Array2::zeros((n, 3));
        for i in 0..n {
            latents[[i, 0]] = factors[[i, 0]] as f32;
            latents[[i, 1]] = 7.5;
            latents[[i, 2]] = i as f32 / n as f32;
        }
        let report = disentanglement_report(latents.view(), factors.view()).unwrap();
        assert!(report.warnings.iter().any(|w| w.contains("latent dimension 1")));
        assert!(report.warnings.iter().any(|w| w.contains("factor 1")));
        assert!(report.mi.column(1).iter().all(|v| *v == 0.0));
        assert!(report.mig > 0.0);
        assert!(report.mig.is_finite() && report.mcc.is_finite());
        // One-to-one partial matching.
        let mut rows: Vec<usize> = report.assignment.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = report.assignment.iter().map(|p| p.1).collect();
        rows.sort();
        rows.dedup();
        cols.sort();
        cols.dedup();
        assert_eq!(rows.len(), report.assignment.len());
        assert_eq!(cols.len(), report.assignment.len());
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let latents = Array2::<f32>::zeros((10, 2));
        let factors = Array2::<u32>::zeros((11, 2));
        assert_eq!(mig(latents.view(), factors.view()).unwrap_err().category(), "argument");
        assert_eq!(mcc(latents.view(), factors.view()).unwrap_err().category(), "argument");
        let nan = Array2::from_elem((11, 2), f32::NAN);
        assert_eq!(mig(nan.view(), factors.view()).unwrap_err().category(), "argument");
    }

    /// Brute-force maximum assignment over all permutations.
    fn brute_force_max(w: &Array2<f64>) -> f64 {
        let n = w.nrows();
        let mut cols: Vec<usize> = (0..n).collect();
        let mut best = f64::NEG_INFINITY;
        permute(&mut cols, 0, &mut |perm| {
            let total: f64 = perm.iter().enumerate().map(|(i, j)| w[[i, *j]]).sum();
            if total > best {
                best = total;
            }
        });
        best
    }

    fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    #[test]
    fn assignment_matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for n in [2usize, 3, 5, 7] {
            for _ in 0..20 {
                let w = Array2::from_shape_simple_fn((n, n), || rng.gen_range(0.0f64..1.0));
                let cols = hungarian_max(&w);
                let total: f64 = cols.iter().enumerate().map(|(i, j)| w[[i, *j]]).sum();
                let best = brute_force_max(&w);
                assert!((total - best).abs() < 1e-9, "n={n}: {total} vs {best}");
                let mut sorted = cols.clone();
                sorted.sort();
                sorted.dedup();
                assert_eq!(sorted.len(), n, "assignment must be a permutation");
            }
        }
    }

    #[test]
    fn pca_reconstructs_full_rank_data() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let latents =
            Array2::from_shape_simple_fn((200, 6), || rng.sample::<f32, _>(StandardNormal));
        let pca = pca_project(latents.view(), 6).unwrap();
        assert!(pca.warnings.is_empty());
        for i in 0..200 {
            for r in 0..6 {
                let mut acc = pca.mean[r];
                for c in 0..6 {
                    acc += pca.projected[[i, c]] as f64 * pca.components[[r, c]];
                }
                assert!(
                    (acc - latents[[i, r]] as f64).abs() < 1e-5,
                    "reconstruction off at ({i}, {r})"
                );
            }
        }
    }

    #[test]
    fn pca_variance_matches_eigenvalues() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut latents = Array2::zeros((500, 5));
        for i in 0..500 {
            let a: f32 = rng.sample(StandardNormal);
            let b: f32 = rng.sample(StandardNormal);
            for j in 0..5 {
                latents[[i, j]] = a * (j as f32 + 1.0) * 0.3
                    + b * (0.5 - j as f32 * 0.1)
                    + 0.2 * rng.sample::<f32, _>(StandardNormal);
            }
        }
        let d = 3;
        let pca = pca_project(latents.view(), d).unwrap();
        let n = 500.0f64;
        for c in 0..d {
            let col: Vec<f64> = (0..500).map(|i| pca.projected[[i, c]] as f64).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(
                (var - pca.eigenvalues[c]).abs() < 1e-6 + 1e-6 * pca.eigenvalues[c],
                "component {c}: variance {var} vs eigenvalue {}",
                pca.eigenvalues[c]
            );
        }
        // Deterministic sign: each kept column's largest loading is positive.
        for c in 0..d {
            let col: Vec<f64> = (0..5).map(|r| pca.components[[r, c]]).collect();
            let arg = (0..5).max_by(|a, b| col[*a].abs().total_cmp(&col[*b].abs())).unwrap();
            assert!(col[arg] > 0.0);
        }
    }

    #[test]
    fn pca_rank_one_data_explains_everything_with_one_component() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut latents = Array2::zeros((300, 4));
        for i in 0..300 {
            let a: f32 = rng.sample(StandardNormal);
            for j in 0..4 {
                latents[[i, j]] = a * (j as f32 - 1.5);
            }
        }
        let pca = pca_project(latents.view(), 1).unwrap();
        let total: f64 = pca.eigenvalues.iter().sum();
        assert!(pca.eigenvalues[0] / total > 1.0 - 1e-9);

        // Asking for more than the rank pads zero columns and warns.
        let wide = pca_project(latents.view(), 3).unwrap();
        assert!(!wide.warnings.is_empty());
        for c in 1..3 {
            assert!(wide.projected.column(c).iter().all(|v| *v == 0.0));
        }

        assert_eq!(pca_project(latents.view(), 5).unwrap_err().category(), "argument");
        assert_eq!(pca_project(latents.view(), 0).unwrap_err().category(), "argument");
    }

    #[test]
    fn blank_images_have_no_sprites() {
        let blank = Array3::from_elem((3, 32, 32), -1.0f32);
        assert_eq!(count_sprites(blank.view()), 0);
        assert!(classify_shapes(blank.view()).is_empty());
    }

    #[test]
    fn count_agrees_with_generator_metadata() {
        let cfg = SpriteSceneConfig::default();
        let ds = gen_sprite_dataset(&cfg, 30, 41).unwrap();
        for i in 0..ds.len() {
            assert_eq!(count_sprites(ds.image(i)), 2, "image {i}");
        }
        let four = SpriteSceneConfig { num_sprites: 4, ..SpriteSceneConfig::default() };
        let ds4 = gen_sprite_dataset(&four, 10, 43).unwrap();
        for i in 0..ds4.len() {
            assert_eq!(count_sprites(ds4.image(i)), 4, "image {i}");
        }
    }

    #[test]
    fn classified_shapes_match_generator_metadata() {
        let cfg = SpriteSceneConfig::default();
        let ds = gen_sprite_dataset(&cfg, 40, 47).unwrap();
        for i in 0..ds.len() {
            let SceneRecord::Sprites(sprites) = &ds.metadata()[i] else { panic!("kind") };
            let mut expected: Vec<&str> = sprites.iter().map(|s| s.shape.as_str()).collect();
            expected.sort();
            let mut got: Vec<&str> =
                classify_shapes(ds.image(i)).iter().map(|s| s.as_str()).collect();
            got.sort();
            assert_eq!(got, expected, "image {i}");
        }
    }

    #[test]
    fn overlaying_disjoint_scenes_doubles_the_count() {
        let cfg = SpriteSceneConfig::default();
        let ds = gen_sprite_dataset(&cfg, 40, 53).unwrap();
        // Find two scenes whose sprites are far apart pairwise, then overlay.
        let centers = |i: usize| -> Vec<(f32, f32)> {
            let SceneRecord::Sprites(s) = &ds.metadata()[i] else { panic!("kind") };
            s.iter().map(|sp| (sp.cx, sp.cy)).collect()
        };
        let mut found = None;
        'outer: for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                let (ci, cj) = (centers(i), centers(j));
                let ok = ci.iter().all(|a| {
                    cj.iter()
                        .all(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() > 12.0)
                });
                if ok {
                    found = Some((i, j));
                    break 'outer;
                }
            }
        }
        let (i, j) = found.expect("some disjoint pair exists");
        let mut overlay = ds.image(i).to_owned();
        for (o, v) in overlay.iter_mut().zip(ds.image(j).iter()) {
            *o = o.max(*v);
        }
        assert_eq!(count_sprites(overlay.view()), 4);
    }

    #[test]
    fn global_dataset_factors_are_recoverable_by_the_metrics() {
        // Factor copies extracted from the generator's own labels verify the
        // whole latent-vs-factor path on dataset-shaped data.
        let ds = gen_global_dataset(&GlobalSceneConfig::default(), 3_000, 59).unwrap();
        let n = ds.len();
        let mut latents = Array2::zeros((n, 4));
        for i in 0..n {
            for j in 0..4 {
                latents[[i, j]] = ds.factors()[[i, j]] as f32;
            }
        }
        let g = mig(latents.view(), ds.factors().view()).unwrap();
        let m = mcc(latents.view(), ds.factors().view()).unwrap();
        assert!(g > 90.0, "mig {g}");
        assert!(m > 99.9, "mcc {m}");
    }

    #[test]
    fn batch_mse_accepts_four_dimensional_tensors() {
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let a = Array4::from_shape_simple_fn((2, 3, 8, 8), || rng.gen_range(-1.0f32..1.0));
        let mut b = a.clone();
        b.index_axis_mut(Axis(0), 1).fill(0.0);
        let (mse, psnr) = mse_psnr(a.view(), b.view()).unwrap();
        assert!(mse > 0.0 && psnr < 100.0);
    }
}
