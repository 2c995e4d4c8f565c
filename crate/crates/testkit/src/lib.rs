//! Slow, direct reference implementations for cross-checking the library.
//!
//! Everything here works on plain slices and shares no code with `wsod-core`.

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// `(eigenvalues, eigenvectors)` with eigenvectors stored column-wise in a
/// row-major `n×n` buffer.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// Nearest positive semidefinite matrix in Frobenius norm: negative
/// eigenvalues set to zero.
pub fn clamp_psd(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = jacobi_eigen(a, n);
    let mut out = vec![0.0; n * n];
    for (k, &lambda) in vals.iter().enumerate() {
        if lambda <= 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += lambda * vecs[i * n + k] * vecs[j * n + k];
            }
        }
    }
    out
}

/// PMI straight from the definition. `None` where the joint count is zero.
pub fn pmi_from_labels(labels: &[Vec<bool>]) -> Vec<Vec<Option<f64>>> {
    let n = labels.len() as f64;
    let d = labels.first().map_or(0, Vec::len);
    let count = |i: usize, j: usize| labels.iter().filter(|l| l[i] && l[j]).count() as f64;
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let joint = count(i, j);
                    (joint > 0.0).then(|| ((joint / n) / ((count(i, i) / n) * (count(j, j) / n))).ln())
                })
                .collect()
        })
        .collect()
}

/// Direct nested-loop cross-correlation over `[N, C, H, W]` inputs and
/// `[O, C, KH, KW]` kernels.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    input: &[f64],
    dims: [usize; 4],
    kernel: &[f64],
    kdims: [usize; 4],
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = dims;
    let [o, kc, kh, kw] = kdims;
    assert_eq!(c, kc);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let y = (i * stride + ki) as isize - padding as isize;
                                let x = (j * stride + kj) as isize - padding as isize;
                                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                    continue;
                                }
                                acc += input[((b * c + ic) * h + y as usize) * w + x as usize]
                                    * kernel[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// Tile means of a `[C, H, W]` map for each level, in level, row, column,
/// class order. Tile `i` of `l` spans `[i·ext/l, (i+1)·ext/l)`.
pub fn naive_pyramid_pool(map: &[f64], c: usize, h: usize, w: usize, levels: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &l in levels {
        for r in 0..l {
            for col in 0..l {
                for k in 0..c {
                    let (mut sum, mut count) = (0.0, 0usize);
                    for y in 0..h {
                        for x in 0..w {
                            let rows = r * h / l..(r + 1) * h / l;
                            let cols = col * w / l..(col + 1) * w / l;
                            if rows.contains(&y) && cols.contains(&x) {
                                sum += map[(k * h + y) * w + x];
                                count += 1;
                            }
                        }
                    }
                    out.push(sum / count as f64);
                }
            }
        }
    }
    out
}

/// Index of the largest value; the earliest wins on ties.
pub fn full_scan_argmax(values: &[f64]) -> usize {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|&v| v == max).expect("non-empty input")
}

/// Connected region found by depth-first flood fill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub size: usize,
    pub first_index: usize,
    pub min_row: usize,
    pub max_row: usize,
    pub min_col: usize,
    pub max_col: usize,
}

/// Regions in order of their first row-major pixel.
pub fn flood_fill(mask: &[bool], h: usize, w: usize, eight: bool) -> Vec<Region> {
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut region = Region {
            size: 0,
            first_index: start,
            min_row: usize::MAX,
            max_row: 0,
            min_col: usize::MAX,
            max_col: 0,
        };
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            region.size += 1;
            region.min_row = region.min_row.min(r);
            region.max_row = region.max_row.max(r);
            region.min_col = region.min_col.min(c);
            region.max_col = region.max_col.max(c);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        regions.push(region);
    }
    regions
}

/// Largest region; among equal sizes the one whose first pixel comes first.
pub fn largest_region(regions: &[Region]) -> Option<&Region> {
    let best = regions.iter().map(|r| r.size).max()?;
    regions.iter().filter(|r| r.size == best).min_by_key(|r| r.first_index)
}

/// Average precision by counting: the rank of an item is the number of items
/// scoring higher, or equal and listed earlier, plus one.
pub fn brute_average_precision(scored: &[(f64, bool)], positive_count: usize) -> Option<f64> {
    if positive_count == 0 {
        return None;
    }
    let ahead = |i: usize, j: usize| scored[j].0 > scored[i].0 || (scored[j].0 == scored[i].0 && j < i);
    let mut total = 0.0;
    for i in 0..scored.len() {
        if !scored[i].1 {
            continue;
        }
        let rank = 1 + (0..scored.len()).filter(|&j| ahead(i, j)).count();
        let hits = 1 + (0..scored.len()).filter(|&j| scored[j].1 && ahead(i, j)).count();
        total += hits as f64 / rank as f64;
    }
    Some(total / positive_count as f64)
}

/// Box as `(x0, y0, x1, y1)` with exclusive maxima.
pub type RawBox = (usize, usize, usize, usize);

/// IoU by enumerating covered pixels.
pub fn pixel_iou(a: RawBox, b: RawBox) -> f64 {
    let inside = |bx: RawBox, x: usize, y: usize| x >= bx.0 && x < bx.2 && y >= bx.1 && y < bx.3;
    let (x1, y1) = (a.2.max(b.2), a.3.max(b.3));
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..y1 {
        for x in 0..x1 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-class CorLoc and the pooled rate. `truth[i]` and `predictions[i]` are
/// `(class, box)` lists of image `i`.
pub fn brute_corloc(
    predictions: &[Vec<(usize, RawBox)>],
    truth: &[Vec<(usize, RawBox)>],
    class_count: usize,
    threshold: f64,
) -> (Vec<Option<f64>>, Option<f64>) {
    let mut per_class = Vec::new();
    let (mut all_hits, mut all_pairs) = (0, 0);
    for k in 0..class_count {
        let (mut hits, mut pairs) = (0, 0);
        for (preds, gt) in predictions.iter().zip(truth) {
            if !gt.iter().any(|(c, _)| *c == k) {
                continue;
            }
            pairs += 1;
            let hit = preds.iter().filter(|(c, _)| *c == k).take(1).any(|(_, p)| {
                gt.iter().filter(|(c, _)| *c == k).any(|(_, g)| pixel_iou(*p, *g) > threshold)
            });
            hits += usize::from(hit);
        }
        all_hits += hits;
        all_pairs += pairs;
        per_class.push((pairs > 0).then(|| hits as f64 / pairs as f64));
    }
    (per_class, (all_pairs > 0).then(|| all_hits as f64 / all_pairs as f64))
}

/// Point-localization AP per class. `points[i]` holds `(class, x, y, score)`.
pub fn brute_pointloc(
    points: &[Vec<(usize, usize, usize, f64)>],
    truth: &[Vec<(usize, RawBox)>],
    class_count: usize,
    tolerance: usize,
) -> Vec<Option<f64>> {
    let t = tolerance as i64;
    (0..class_count)
        .map(|k| {
            let mut scored = Vec::new();
            for (pts, gt) in points.iter().zip(truth) {
                for &(_, x, y, s) in pts.iter().filter(|p| p.0 == k) {
                    let hit = gt.iter().filter(|(gc, _)| *gc == k).any(|(_, b)| {
                        let (x, y) = (x as i64, y as i64);
                        x + t >= b.0 as i64 && x < b.2 as i64 + t && y + t >= b.1 as i64 && y < b.3 as i64 + t
                    });
                    scored.push((s, hit));
                }
            }
            let positives = truth.iter().filter(|g| g.iter().any(|(c, _)| *c == k)).count();
            brute_average_precision(&scored, positives)
        })
        .collect()
}

/// Central-difference derivative of a scalar function of one variable.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
