//! From a confidence map to a discriminative image crop.
//!
//! The selected map is resized to the image, divided by its maximum,
//! thresholded, split into 4-connected components, and the dominant
//! component's bounding box is cut out of the image.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Values at or below this are treated as no activation at all.
pub const MAP_EPS: f64 = 1e-9;
/// Default binarization threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Components smaller than this fraction of the map are discarded.
pub const DEFAULT_MIN_FRACTION: f64 = 0.01;

/// A row-major grid of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2d {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Map2d {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width * height != values.len() {
            return Err(Error::contract(format!(
                "{width}x{height} map needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    /// Wraps a 2-D `[h, w]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w] = t.dims2()?;
        Self::new(w, h, t.data().to_vec())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A map whose maximum is exactly 1 and whose values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(Map2d);

impl ConfidenceMap {
    pub fn map(&self) -> &Map2d {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width * height != bits.len() {
            return Err(Error::contract("mask size does not match its extents"));
        }
        Ok(Self { width, height, bits })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BoundingBox {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            row0: 0,
            col0: 0,
            row1: height.saturating_sub(1),
            col1: width.saturating_sub(1),
        }
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0 + 1
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..=self.row1).contains(&row) && (self.col0..=self.col1).contains(&col)
    }
}

/// A connected set of `(row, col)` pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelRegion {
    pub label: usize,
    pub pixels: Vec<(usize, usize)>,
}

impl PixelRegion {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

/// Component labelling of a mask.
#[derive(Debug, Clone)]
pub struct Components {
    pub width: usize,
    pub height: usize,
    /// Per-pixel label, `None` for background.
    pub labels: Vec<Option<usize>>,
    /// Regions indexed by label.
    pub regions: Vec<PixelRegion>,
}

/// Bilinear resampling with edge-aligned corners: the first and last output
/// samples coincide with the first and last source samples.
pub fn resize_bilinear(map: &Map2d, out_w: usize, out_h: usize) -> Result<Map2d> {
    if out_w == 0 || out_h == 0 || map.width == 0 || map.height == 0 {
        return Err(Error::contract("resize to or from an empty map"));
    }
    let coord = |i: usize, out: usize, src: usize| -> (usize, usize, f64) {
        let pos = if out == 1 {
            (src - 1) as f64 / 2.0
        } else {
            i as f64 * (src - 1) as f64 / (out - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut values = Vec::with_capacity(out_w * out_h);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, out_h, map.height);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, out_w, map.width);
            let top = map.get(r0, c0) * (1.0 - fc) + map.get(r0, c1) * fc;
            let bottom = map.get(r1, c0) * (1.0 - fc) + map.get(r1, c1) * fc;
            values.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Map2d::new(out_w, out_h, values)
}

/// Resizes every channel of a `[c, h, w]` image.
pub fn resize_image(image: &Tensor, out_w: usize, out_h: usize) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        other => return Err(Error::contract(format!("expected a [c, h, w] image, got {other:?}"))),
    };
    let mut data = Vec::with_capacity(c * out_w * out_h);
    for plane in image.data().chunks_exact(h * w) {
        let m = resize_bilinear(&Map2d::new(w, h, plane.to_vec())?, out_w, out_h)?;
        data.extend(m.values);
    }
    Tensor::new(vec![c, out_h, out_w], data)
}

/// Divides by the maximum so the peak becomes exactly 1. Negative values clamp to 0.
pub fn normalize_map(map: &Map2d) -> Result<ConfidenceMap> {
    let max = map.max();
    if !(max > MAP_EPS) {
        return Err(Error::DegenerateMap(MAP_EPS));
    }
    let values = map
        .values
        .iter()
        .map(|&v| if v == max { 1.0 } else { (v / max).clamp(0.0, 1.0) })
        .collect();
    Ok(ConfidenceMap(Map2d::new(map.width, map.height, values)?))
}

/// Foreground wherever the value is at least `threshold`.
pub fn binarize(map: &ConfidenceMap, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("threshold {threshold} outside (0, 1)")));
    }
    let m = map.map();
    BinaryMask::new(m.width, m.height, m.values.iter().map(|&v| v >= threshold).collect())
}

/// 4-connected labelling; labels follow first encounter in row-major order.
pub fn label_components(mask: &BinaryMask) -> Components {
    let (w, h) = (mask.width, mask.height);
    let mut labels: Vec<Option<usize>> = vec![None; w * h];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start].is_some() {
            continue;
        }
        let label = regions.len();
        let mut pixels = Vec::new();
        labels[start] = Some(label);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            pixels.push((r, c));
            let mut visit = |q: usize| {
                if mask.bits[q] && labels[q].is_none() {
                    labels[q] = Some(label);
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        pixels.sort_unstable();
        regions.push(PixelRegion { label, pixels });
    }
    Components {
        width: w,
        height: h,
        labels,
        regions,
    }
}

/// Largest component among those covering at least `min_frac` of the map.
/// Ties go to the lower label.
pub fn dominant_region(components: &Components, min_frac: f64) -> Result<&PixelRegion> {
    if !(0.0..1.0).contains(&min_frac) {
        return Err(Error::contract(format!("min fraction {min_frac} outside [0, 1)")));
    }
    let cutoff = min_frac * (components.width * components.height) as f64;
    let mut best: Option<&PixelRegion> = None;
    for region in components.regions.iter().filter(|r| r.size() as f64 >= cutoff) {
        if best.map_or(true, |b| region.size() > b.size()) {
            best = Some(region);
        }
    }
    best.ok_or(Error::NoDominantRegion)
}

/// Axis-aligned bounding box of the region's pixels.
pub fn min_enclosing_rect(region: &PixelRegion) -> Result<BoundingBox> {
    let (&(r, c), rest) = region
        .pixels
        .split_first()
        .ok_or_else(|| Error::contract("bounding box of an empty region"))?;
    let mut b = BoundingBox {
        row0: r,
        col0: c,
        row1: r,
        col1: c,
    };
    for &(r, c) in rest {
        b.row0 = b.row0.min(r);
        b.row1 = b.row1.max(r);
        b.col0 = b.col0.min(c);
        b.col1 = b.col1.max(c);
    }
    Ok(b)
}

/// Scales an inclusive `[lo, hi]` map interval to image pixels, rounding outward.
fn scale_interval(lo: usize, hi: usize, map_extent: usize, image_extent: usize) -> (usize, usize) {
    let start = lo * image_extent / map_extent;
    let end = ((hi + 1) * image_extent).div_ceil(map_extent);
    (start, end.min(image_extent).max(start + 1) - 1)
}

/// Cuts `bbox` (given in map coordinates of a `map_w x map_h` map) out of a `[c, h, w]` image.
pub fn crop_region(image: &Tensor, bbox: &BoundingBox, map_w: usize, map_h: usize) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] if h > 0 && w > 0 => (c, h, w),
        other => return Err(Error::contract(format!("expected a non-empty [c, h, w] image, got {other:?}"))),
    };
    if map_w == 0 || map_h == 0 || bbox.row0 > bbox.row1 || bbox.col0 > bbox.col1 || bbox.row1 >= map_h || bbox.col1 >= map_w {
        return Err(Error::contract(format!("box {bbox:?} invalid for a {map_w}x{map_h} map")));
    }
    let (r0, r1) = scale_interval(bbox.row0, bbox.row1, map_h, h);
    let (c0, c1) = scale_interval(bbox.col0, bbox.col1, map_w, w);
    let (ch, cw) = (r1 - r0 + 1, c1 - c0 + 1);
    let mut data = Vec::with_capacity(c * ch * cw);
    for plane in image.data().chunks_exact(h * w) {
        for r in r0..=r1 {
            data.extend_from_slice(&plane[r * w + c0..=r * w + c1]);
        }
    }
    Tensor::new(vec![c, ch, cw], data)
}

/// Outcome of region extraction for one image.
#[derive(Debug, Clone)]
pub struct RegionResult {
    /// Box in image coordinates.
    pub bbox: BoundingBox,
    /// Cropped `[c, h', w']` pixels.
    pub crop: Tensor,
    /// False when the map was degenerate or nothing survived and the full
    /// image stands in for the region.
    pub found: bool,
    pub map: Option<ConfidenceMap>,
    pub mask: Option<BinaryMask>,
}

/// Full map-to-crop chain with a whole-image fallback.
///
/// `map` is the raw selected confidence map; it is resized to the image
/// extents before normalization.
pub fn extract_region(image: &Tensor, map: &Map2d, threshold: f64, min_frac: f64) -> Result<RegionResult> {
    let (h, w) = match image.shape() {
        &[_, h, w] => (h, w),
        other => return Err(Error::contract(format!("expected a [c, h, w] image, got {other:?}"))),
    };
    let resized = resize_bilinear(map, w, h)?;
    let fallback = |map: Option<ConfidenceMap>, mask: Option<BinaryMask>| RegionResult {
        bbox: BoundingBox::full(w, h),
        crop: image.clone(),
        found: false,
        map,
        mask,
    };
    let conf = match normalize_map(&resized) {
        Ok(c) => c,
        Err(Error::DegenerateMap(_)) => {
            log::debug!("degenerate confidence map, using the full image");
            return Ok(fallback(None, None));
        }
        Err(e) => return Err(e),
    };
    let mask = binarize(&conf, threshold)?;
    let components = label_components(&mask);
    let bbox = match dominant_region(&components, min_frac) {
        Ok(region) => min_enclosing_rect(region)?,
        Err(Error::NoDominantRegion) => {
            log::debug!("no dominant region, using the full image");
            return Ok(fallback(Some(conf), Some(mask)));
        }
        Err(e) => return Err(e),
    };
    let crop = crop_region(image, &bbox, w, h)?;
    Ok(RegionResult {
        bbox,
        crop,
        found: true,
        map: Some(conf),
        mask: Some(mask),
    })
}

/// Writes a map as 8-bit PGM, scaling `[0, max]` to `[0, 255]`.
pub fn write_map_pgm(map: &Map2d, path: &Path) -> Result<()> {
    let max = map.max();
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let pixels: Vec<u8> = map
        .values
        .iter()
        .map(|&v| (v.max(0.0) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    crate::pgm::write_bytes(path, map.width, map.height, &pixels)
}

/// Writes a mask as 8-bit PGM: foreground 255, background 0.
pub fn write_mask_pgm(mask: &BinaryMask, path: &Path) -> Result<()> {
    let pixels: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    crate::pgm::write_bytes(path, mask.width, mask.height, &pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, v: &[f64]) -> Map2d {
        Map2d::new(w, h, v.to_vec()).unwrap()
    }

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut bits = vec![false; w * h];
        for &(r, c) in on {
            bits[r * w + c] = true;
        }
        BinaryMask::new(w, h, bits).unwrap()
    }

    #[test]
    fn resize_constant_and_single_pixel() {
        let m = resize_bilinear(&map(3, 2, &[0.7; 6]), 5, 7).unwrap();
        assert!(m.values.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let m = resize_bilinear(&map(1, 1, &[2.5]), 4, 3).unwrap();
        assert_eq!(m.values, vec![2.5; 12]);
    }

    #[test]
    fn resize_edge_aligned_ramp() {
        let m = resize_bilinear(&map(2, 2, &[0.0, 1.0, 0.0, 1.0]), 4, 2).unwrap();
        let row = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for r in 0..2 {
            for c in 0..4 {
                assert!((m.get(r, c) - row[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let c = normalize_map(&map(2, 1, &[1.0, 2.0])).unwrap();
        assert_eq!(c.map().values, vec![0.5, 1.0]);
        let c = normalize_map(&map(2, 2, &[0.3; 4])).unwrap();
        assert_eq!(c.map().values, vec![1.0; 4]);
        assert!(matches!(normalize_map(&map(2, 1, &[0.0, 0.0])), Err(Error::DegenerateMap(_))));
    }

    #[test]
    fn binarize_threshold_is_inclusive() {
        let c = normalize_map(&map(4, 1, &[0.4, 0.6, 0.5, 1.0])).unwrap();
        let m = binarize(&c, 0.5).unwrap();
        assert_eq!(m.bits, vec![false, true, true, true]);
        let c = normalize_map(&map(2, 1, &[0.1, 1.0])).unwrap();
        assert_eq!(binarize(&c, 0.99).unwrap().count(), 1);
    }

    #[test]
    fn diagonal_pixels_are_separate_components() {
        let comps = label_components(&mask(2, 2, &[(0, 0), (1, 1)]));
        assert_eq!(comps.regions.len(), 2);
        assert_eq!(comps.labels, vec![Some(0), None, None, Some(1)]);
    }

    #[test]
    fn plus_shape_is_one_component() {
        let comps = label_components(&mask(3, 3, &[(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)]));
        assert_eq!(comps.regions.len(), 1);
        assert_eq!(comps.regions[0].size(), 5);
    }

    #[test]
    fn dominant_region_examples() {
        // sizes 5 and 3
        let comps = label_components(&mask(
            5,
            3,
            &[(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (0, 3), (0, 4), (1, 4)],
        ));
        assert_eq!(dominant_region(&comps, 0.01).unwrap().size(), 5);
        let empty = label_components(&mask(3, 3, &[]));
        assert!(matches!(dominant_region(&empty, 0.01), Err(Error::NoDominantRegion)));
        let tied = label_components(&mask(3, 1, &[(0, 0), (0, 2)]));
        assert_eq!(dominant_region(&tied, 0.0).unwrap().label, 0);
        // 1 pixel of 100 is below a 2% cutoff
        let tiny = label_components(&mask(10, 10, &[(3, 3)]));
        assert!(dominant_region(&tiny, 0.02).is_err());
    }

    #[test]
    fn bounding_box_examples() {
        let r = PixelRegion {
            label: 0,
            pixels: vec![(0, 1), (2, 3)],
        };
        assert_eq!(
            min_enclosing_rect(&r).unwrap(),
            BoundingBox { row0: 0, col0: 1, row1: 2, col1: 3 }
        );
        let single = PixelRegion { label: 0, pixels: vec![(4, 4)] };
        let b = min_enclosing_rect(&single).unwrap();
        assert_eq!((b.row0, b.col0, b.height(), b.width()), (4, 4, 1, 1));
        let full: Vec<_> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).collect();
        let comps = label_components(&mask(4, 3, &full));
        assert_eq!(min_enclosing_rect(&comps.regions[0]).unwrap(), BoundingBox::full(4, 3));
        assert!(min_enclosing_rect(&PixelRegion { label: 0, pixels: vec![] }).is_err());
    }

    #[test]
    fn crop_scaling() {
        let img = Tensor::new(vec![1, 8, 8], (0..64).map(|v| v as f64).collect()).unwrap();
        // identical map and image size: a direct crop
        let b = BoundingBox { row0: 2, col0: 3, row1: 4, col1: 3 };
        let crop = crop_region(&img, &b, 8, 8).unwrap();
        assert_eq!(crop.shape(), &[1, 3, 1]);
        assert_eq!(crop.data(), &[19.0, 27.0, 35.0]);
        // full map box gives the whole image
        assert_eq!(crop_region(&img, &BoundingBox::full(4, 4), 4, 4).unwrap(), img);
        // map rows 0..1 of 4 cover image rows 0..3 of 8
        let b = BoundingBox { row0: 0, col0: 0, row1: 1, col1: 3 };
        let crop = crop_region(&img, &b, 4, 4).unwrap();
        assert_eq!(crop.shape(), &[1, 4, 8]);
        assert_eq!(crop.data()[31], 31.0);
    }

    #[test]
    fn outward_rounding_never_loses_pixels() {
        // map 3 wide over a 7 wide image: cell 1 spans [7/3, 14/3) -> columns 2..4
        assert_eq!(scale_interval(1, 1, 3, 7), (2, 4));
        assert_eq!(scale_interval(0, 2, 3, 7), (0, 6));
    }

    #[test]
    fn extraction_falls_back_on_degenerate_map() {
        let img = Tensor::full(&[1, 4, 4], 0.5);
        let r = extract_region(&img, &map(2, 2, &[0.0; 4]), 0.5, 0.01).unwrap();
        assert!(!r.found);
        assert_eq!(r.crop, img);
    }

    #[test]
    fn extraction_crops_the_hot_spot() {
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let m = map(4, 4, &[0., 0., 0., 0., 0., 3., 2., 0., 0., 2., 2., 0., 0., 0., 0., 0.]);
        let r = extract_region(&img, &m, 0.5, 0.01).unwrap();
        assert!(r.found);
        assert_eq!(r.bbox, BoundingBox { row0: 1, col0: 1, row1: 2, col1: 2 });
        assert_eq!(r.crop.data(), &[5.0, 6.0, 9.0, 10.0]);
    }
}
