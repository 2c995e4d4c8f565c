//! Spatial-pyramid label encoding and average pooling of activation maps.
//!
//! Vectors are laid out level-major, then tile in row-major order within a
//! level, then class index within a tile. With levels `[1, 2]` and `C`
//! classes the vector has `5C` entries: `C` image-level entries followed by
//! four blocks of `C` for the tiles (0,0), (0,1), (1,0), (1,1).

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::cam::ClassActivationMap;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PyramidSpecRepr", into = "PyramidSpecRepr")]
pub struct PyramidSpec {
    levels: Vec<usize>,
    class_count: usize,
}

#[derive(Serialize, Deserialize)]
struct PyramidSpecRepr {
    levels: Vec<usize>,
    class_count: usize,
}

impl TryFrom<PyramidSpecRepr> for PyramidSpec {
    type Error = Error;

    fn try_from(r: PyramidSpecRepr) -> Result<Self> {
        PyramidSpec::new(r.levels, r.class_count)
    }
}

impl From<PyramidSpec> for PyramidSpecRepr {
    fn from(s: PyramidSpec) -> Self {
        PyramidSpecRepr {
            levels: s.levels,
            class_count: s.class_count,
        }
    }
}

impl PyramidSpec {
    pub fn new(levels: Vec<usize>, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        if levels.first() != Some(&1) {
            return Err(Error::Config(format!("pyramid levels must start at 1, got {levels:?}")));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("pyramid levels must be strictly increasing, got {levels:?}")));
        }
        Ok(PyramidSpec { levels, class_count })
    }

    /// Levels `[1]`: one global entry per class.
    pub fn image_level(class_count: usize) -> Result<Self> {
        Self::new(vec![1], class_count)
    }

    /// Levels `[1, 2]`: global entries followed by a 2×2 grid.
    pub fn two_level(class_count: usize) -> Result<Self> {
        Self::new(vec![1, 2], class_count)
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn max_level(&self) -> usize {
        *self.levels.last().expect("non-empty levels")
    }

    /// `C · Σ l²`
    pub fn total_dim(&self) -> usize {
        self.class_count * self.levels.iter().map(|l| l * l).sum::<usize>()
    }

    /// Offset of the first entry of level number `level_idx` (position in `levels`).
    pub fn level_offset(&self, level_idx: usize) -> usize {
        self.class_count * self.levels[..level_idx].iter().map(|l| l * l).sum::<usize>()
    }

    pub fn index(&self, level_idx: usize, row: usize, col: usize, class: usize) -> usize {
        let l = self.levels[level_idx];
        self.level_offset(level_idx) + (row * l + col) * self.class_count + class
    }

    /// Pixel span `[floor(i·extent/l), floor((i+1)·extent/l))` of tile `i` at level `l`.
    pub fn tile_span(extent: usize, level: usize, i: usize) -> Range<usize> {
        (i * extent / level)..((i + 1) * extent / level)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.class_count {
            return Err(Error::ClassOutOfRange {
                class,
                class_count: self.class_count,
            });
        }
        Ok(())
    }
}

impl fmt::Display for PyramidSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let levels: Vec<String> = self.levels.iter().map(|l| l.to_string()).collect();
        write!(f, "spec={} C={}", levels.join(","), self.class_count)
    }
}

/// Point annotation of one object instance, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub class: usize,
    pub x: usize,
    pub y: usize,
}

impl LabeledPoint {
    pub fn new(class: usize, x: usize, y: usize) -> Self {
        LabeledPoint { class, x, y }
    }
}

/// Binary presence vector over (level, tile, class).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidLabelVector {
    spec: PyramidSpec,
    bits: Vec<bool>,
}

impl PyramidLabelVector {
    pub fn zeros(spec: &PyramidSpec) -> Self {
        PyramidLabelVector {
            bits: vec![false; spec.total_dim()],
            spec: spec.clone(),
        }
    }

    pub fn spec(&self) -> &PyramidSpec {
        &self.spec
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn get(&self, level_idx: usize, row: usize, col: usize, class: usize) -> bool {
        self.bits[self.spec.index(level_idx, row, col, class)]
    }

    fn set(&mut self, level_idx: usize, row: usize, col: usize, class: usize) {
        let i = self.spec.index(level_idx, row, col, class);
        self.bits[i] = true;
    }

    /// A class present in any tile of any level is also present at level 1.
    pub fn satisfies_hierarchy(&self) -> bool {
        let c = self.spec.class_count;
        for (li, &l) in self.spec.levels.iter().enumerate().skip(1) {
            for tile in 0..l * l {
                for k in 0..c {
                    if self.get(li, tile / l, tile % l, k) && !self.bits[k] {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// `spec=<levels> C=<n> <bits>` on a single line.
    pub fn to_line(&self) -> String {
        let bits: String = self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        format!("{} {bits}", self.spec)
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("bad pyramid label line `{line}`: {msg}"));
        let mut parts = line.split_whitespace();
        let levels = parts
            .next()
            .and_then(|p| p.strip_prefix("spec="))
            .ok_or_else(|| bad("missing spec="))?
            .split(',')
            .map(|l| l.parse::<usize>().map_err(|_| bad("bad level")))
            .collect::<Result<Vec<_>>>()?;
        let classes = parts
            .next()
            .and_then(|p| p.strip_prefix("C="))
            .and_then(|c| c.parse::<usize>().ok())
            .ok_or_else(|| bad("missing C="))?;
        let spec = PyramidSpec::new(levels, classes)?;
        let bits = parts
            .next()
            .ok_or_else(|| bad("missing bits"))?
            .chars()
            .map(|ch| match ch {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(bad("bits must be 0/1")),
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.len() != spec.total_dim() || parts.next().is_some() {
            return Err(bad("wrong length"));
        }
        Ok(PyramidLabelVector { spec, bits })
    }
}

/// Image-level supervision: level-1 bits for the present classes, nothing finer.
pub fn encode_image_labels(present_classes: &[usize], spec: &PyramidSpec) -> Result<PyramidLabelVector> {
    let mut v = PyramidLabelVector::zeros(spec);
    for &k in present_classes {
        spec.check_class(k)?;
        v.set(0, 0, 0, k);
    }
    Ok(v)
}

/// Tile `(row, col)` containing pixel `(x, y)` at level `l`.
pub fn point_tile(x: usize, y: usize, image_size: (usize, usize), level: usize) -> (usize, usize) {
    let (w, h) = image_size;
    ((y * level / h).min(level - 1), (x * level / w).min(level - 1))
}

/// Point-wise supervision: every tile of every level containing a point of a
/// class is marked present for that class.
pub fn encode_point_labels(
    points: &[LabeledPoint],
    image_size: (usize, usize),
    spec: &PyramidSpec,
) -> Result<PyramidLabelVector> {
    let (w, h) = image_size;
    let mut v = PyramidLabelVector::zeros(spec);
    for p in points {
        spec.check_class(p.class)?;
        if p.x >= w || p.y >= h {
            return Err(Error::PointOutsideImage {
                x: p.x,
                y: p.y,
                width: w,
                height: h,
            });
        }
        for (li, &l) in spec.levels.iter().enumerate() {
            let (r, c) = point_tile(p.x, p.y, image_size, l);
            v.set(li, r, c, p.class);
        }
    }
    Ok(v)
}

/// Point-wise supervision plus level-1 presence of `present_classes`, which
/// keeps classes whose points fell outside the frame.
pub fn encode_labels(
    present_classes: &[usize],
    points: &[LabeledPoint],
    image_size: (usize, usize),
    spec: &PyramidSpec,
) -> Result<PyramidLabelVector> {
    let mut v = encode_point_labels(points, image_size, spec)?;
    for &k in present_classes {
        spec.check_class(k)?;
        v.set(0, 0, 0, k);
    }
    Ok(v)
}

fn check_pool_dims(classes: usize, h: usize, w: usize, spec: &PyramidSpec) -> Result<()> {
    if classes != spec.class_count {
        return Err(Error::DimensionMismatch {
            expected: spec.class_count,
            actual: classes,
        });
    }
    let l = spec.max_level();
    if h < l || w < l {
        return Err(Error::Shape(format!(
            "map {h}x{w} is smaller than the finest pyramid level {l}"
        )));
    }
    Ok(())
}

/// Mean of every class channel over every pyramid tile, in vector order.
pub fn spp_average_pool(cam: &ClassActivationMap, spec: &PyramidSpec) -> Result<Vec<f64>> {
    let (c, h, w) = (cam.classes(), cam.height(), cam.width());
    check_pool_dims(c, h, w, spec)?;
    let mut out = vec![0.0; spec.total_dim()];
    for (li, &l) in spec.levels.iter().enumerate() {
        for r in 0..l {
            let rows = PyramidSpec::tile_span(h, l, r);
            for col in 0..l {
                let cols = PyramidSpec::tile_span(w, l, col);
                let area = (rows.len() * cols.len()) as f64;
                for k in 0..c {
                    let channel = cam.channel(k);
                    let mut sum = 0.0;
                    for y in rows.clone() {
                        sum += channel[y * w + cols.start..y * w + cols.end].iter().sum::<f64>();
                    }
                    out[spec.index(li, r, col, k)] = sum / area;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`spp_average_pool`]: each pooled gradient is spread uniformly
/// over its tile and contributions of all levels are summed. Returns a
/// `[C, H, W]` tensor.
pub fn spp_average_pool_backward(
    grad: &[f64],
    spec: &PyramidSpec,
    map_dims: (usize, usize, usize),
) -> Result<Tensor> {
    let (c, h, w) = map_dims;
    check_pool_dims(c, h, w, spec)?;
    if grad.len() != spec.total_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.total_dim(),
            actual: grad.len(),
        });
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    let data = out.data_mut();
    for (li, &l) in spec.levels.iter().enumerate() {
        for r in 0..l {
            let rows = PyramidSpec::tile_span(h, l, r);
            for col in 0..l {
                let cols = PyramidSpec::tile_span(w, l, col);
                let area = (rows.len() * cols.len()) as f64;
                for k in 0..c {
                    let g = grad[spec.index(li, r, col, k)] / area;
                    if g == 0.0 {
                        continue;
                    }
                    for y in rows.clone() {
                        let base = k * h * w + y * w;
                        for v in &mut data[base + cols.start..base + cols.end] {
                            *v += g;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(PyramidSpec::new(vec![], 2).is_err());
        assert!(PyramidSpec::new(vec![2], 2).is_err());
        assert!(PyramidSpec::new(vec![1, 2, 2], 2).is_err());
        assert!(PyramidSpec::new(vec![1, 2], 0).is_err());
        assert_eq!(PyramidSpec::two_level(4).unwrap().total_dim(), 20);
        assert_eq!(PyramidSpec::new(vec![1, 2, 4], 3).unwrap().total_dim(), 63);
    }

    #[test]
    fn image_labels() {
        let v = encode_image_labels(&[0, 2], &PyramidSpec::image_level(3).unwrap()).unwrap();
        assert_eq!(v.bits(), &[true, false, true]);

        let v = encode_image_labels(&[1], &PyramidSpec::two_level(2).unwrap()).unwrap();
        assert_eq!(v.as_f64(), vec![0., 1., 0., 0., 0., 0., 0., 0., 0., 0.]);

        let v = encode_image_labels(&[], &PyramidSpec::two_level(2).unwrap()).unwrap();
        assert!(v.is_empty());

        assert!(matches!(
            encode_image_labels(&[3], &PyramidSpec::image_level(3).unwrap()),
            Err(Error::ClassOutOfRange { class: 3, .. })
        ));
    }

    #[test]
    fn two_dogs_fixture() {
        let spec = PyramidSpec::two_level(1).unwrap();
        let points = [LabeledPoint::new(0, 20, 20), LabeledPoint::new(0, 80, 20)];
        let v = encode_point_labels(&points, (100, 100), &spec).unwrap();
        // level 1, tiles (0,0), (0,1), (1,0), (1,1)
        assert_eq!(v.bits(), &[true, true, true, false, false]);
        assert_eq!(v.to_line(), "spec=1,2 C=1 11100");
        assert_eq!(PyramidLabelVector::parse_line(&v.to_line()).unwrap(), v);
    }

    #[test]
    fn corner_point_lands_in_last_tile() {
        let spec = PyramidSpec::new(vec![1, 2, 3], 1).unwrap();
        let v = encode_point_labels(&[LabeledPoint::new(0, 63, 47)], (64, 48), &spec).unwrap();
        assert!(v.get(1, 1, 1, 0));
        assert!(v.get(2, 2, 2, 0));
        assert_eq!(v.count_ones(), 3);
    }

    #[test]
    fn point_outside_image_is_rejected() {
        let spec = PyramidSpec::two_level(1).unwrap();
        assert!(matches!(
            encode_point_labels(&[LabeledPoint::new(0, 10, 5)], (10, 10), &spec),
            Err(Error::PointOutsideImage { .. })
        ));
    }

    #[test]
    fn pooling_small_map() {
        let cam = ClassActivationMap::from_fn(1, 2, 2, |_, r, c| (r * 2 + c + 1) as f64);
        let pooled = spp_average_pool(&cam, &PyramidSpec::two_level(1).unwrap()).unwrap();
        assert_eq!(pooled, vec![2.5, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pooling_constant_map() {
        let cam = ClassActivationMap::from_fn(3, 5, 7, |_, _, _| -1.25);
        let pooled = spp_average_pool(&cam, &PyramidSpec::new(vec![1, 2, 3], 3).unwrap()).unwrap();
        assert!(pooled.iter().all(|&v| (v + 1.25).abs() < 1e-15));
    }

    #[test]
    fn uneven_tiles() {
        assert_eq!(PyramidSpec::tile_span(3, 2, 0), 0..1);
        assert_eq!(PyramidSpec::tile_span(3, 2, 1), 1..3);
        let cam = ClassActivationMap::from_fn(1, 1, 4, |_, _, _| 0.0);
        assert!(spp_average_pool(&cam, &PyramidSpec::two_level(1).unwrap()).is_err());
    }
}
