//! RGB feature channels and the image-to-input-vector pipeline.
//!
//! A feature is a non-negative weighting of the three primary color channels.
//! Images are reduced to one channel by the feature weights, mean-pooled over
//! 2x2 cells, trimmed by one border pixel, and affinely scaled into [-1, 1].
//! A 64x64 image becomes a 900-dimensional input vector.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Largest weight sum among the built-in feature rows (the Z row).
pub const MAX_WEIGHT_SUM: f64 = 1.0887;

/// Slack for float round-off when validating values against their
/// theoretical range.
const RANGE_SLACK: f64 = 1e-9;

/// One feature channel: a named non-negative weighting of R, G and B.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub wr: f64,
    pub wg: f64,
    pub wb: f64,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, wr: f64, wg: f64, wb: f64) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Domain(format!("invalid feature name {name:?}")));
        }
        if !(wr >= 0.0 && wg >= 0.0 && wb >= 0.0) {
            return Err(Error::Domain(format!("feature {name}: negative weight")));
        }
        let sum = wr + wg + wb;
        if sum <= 0.0 || sum > MAX_WEIGHT_SUM + RANGE_SLACK {
            return Err(Error::Domain(format!(
                "feature {name}: weight sum {sum} outside (0, {MAX_WEIGHT_SUM}]"
            )));
        }
        Ok(Self { name, wr, wg, wb })
    }

    pub fn weight_sum(&self) -> f64 {
        self.wr + self.wg + self.wb
    }
}

/// The built-in catalog table: one feature per line, `name wr wg wb`,
/// weights written exactly as in the source table (eRGB keeps its
/// rational form).
const CATALOG_TABLE: &str = "\
R 1 0 0
G 0 1 0
B 0 0 1
RGg1 0.618 0.382 0
RBg1 0.618 0 0.382
GBg1 0 0.618 0.382
RGg2 0.382 0.618 0
RBg2 0.382 0 0.618
GBg2 0 0.382 0.618
RG 0.5 0.5 0
RB 0.5 0 0.5
GB 0 0.5 0.5
eRGB 1/3 1/3 1/3
BW 0.299 0.587 0.114
X 0.4125 0.3576 0.1804
Y 0.2126 0.7152 0.0722
Z 0.0193 0.1192 0.9502
";

static CATALOG: OnceLock<Vec<FeatureSpec>> = OnceLock::new();

/// The 17 built-in feature channels, in table order.
pub fn catalog() -> &'static [FeatureSpec] {
    CATALOG.get_or_init(|| import_catalog(CATALOG_TABLE).expect("built-in catalog is well-formed"))
}

/// Looks up a built-in feature by name.
pub fn catalog_spec(name: &str) -> Option<&'static FeatureSpec> {
    catalog().iter().find(|s| s.name == name)
}

/// The canonical plain-text form of the built-in catalog.
pub fn catalog_text() -> &'static str {
    CATALOG_TABLE
}

/// Writes the built-in catalog table.
pub fn export_catalog<W: std::io::Write>(mut w: W) -> Result<()> {
    w.write_all(CATALOG_TABLE.as_bytes())?;
    Ok(())
}

fn parse_weight(token: &str) -> Result<f64> {
    if let Some((num, den)) = token.split_once('/') {
        let n: f64 = num
            .parse()
            .map_err(|_| Error::Parse(format!("bad weight {token:?}")))?;
        let d: f64 = den
            .parse()
            .map_err(|_| Error::Parse(format!("bad weight {token:?}")))?;
        if d == 0.0 {
            return Err(Error::Parse(format!("bad weight {token:?}")));
        }
        Ok(n / d)
    } else {
        token
            .parse()
            .map_err(|_| Error::Parse(format!("bad weight {token:?}")))
    }
}

/// Parses a catalog table (`name wr wg wb` per line, blank lines ignored).
pub fn import_catalog(text: &str) -> Result<Vec<FeatureSpec>> {
    let mut specs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "catalog line {}: expected `name wr wg wb`, got {line:?}",
                lineno + 1
            )));
        }
        specs.push(FeatureSpec::new(
            fields[0],
            parse_weight(fields[1])?,
            parse_weight(fields[2])?,
            parse_weight(fields[3])?,
        )?);
    }
    Ok(specs)
}

/// An RGB image with byte intensities, stored as three row-major planes.
///
/// Height and width must be even and at least 4 so that 2x2 pooling
/// followed by a one-pixel trim leaves a non-empty matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    planes: [Vec<u8>; 3],
}

impl RgbImage {
    pub fn new(height: usize, width: usize, planes: [Vec<u8>; 3]) -> Result<Self> {
        if height < 4 || width < 4 || height % 2 != 0 || width % 2 != 0 {
            return Err(Error::Dimension(format!(
                "image dimensions {height}x{width} must be even and >= 4"
            )));
        }
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != height * width {
                return Err(Error::Dimension(format!(
                    "plane {c} has {} values, expected {}",
                    plane.len(),
                    height * width
                )));
            }
        }
        Ok(Self {
            height,
            width,
            planes,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> (u8, u8, u8),
    ) -> Result<Self> {
        let mut planes = [
            Vec::with_capacity(height * width),
            Vec::with_capacity(height * width),
            Vec::with_capacity(height * width),
        ];
        for y in 0..height {
            for x in 0..width {
                let (r, g, b) = f(y, x);
                planes[0].push(r);
                planes[1].push(g);
                planes[2].push(b);
            }
        }
        Self::new(height, width, planes)
    }

    pub fn constant(height: usize, width: usize, rgb: (u8, u8, u8)) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self, channel: usize) -> &[u8] {
        &self.planes[channel]
    }

    pub fn pixel(&self, y: usize, x: usize) -> (u8, u8, u8) {
        let i = y * self.width + x;
        (self.planes[0][i], self.planes[1][i], self.planes[2][i])
    }
}

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension("ragged matrix rows".into()));
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Flat row-major image vector with entries in [-1, 1].
pub type FeatureVector = Vec<f64>;

/// Mean-pools non-overlapping 2x2 cells. Requires even dimensions.
pub fn downsample_mean(m: &Matrix) -> Result<Matrix> {
    if m.rows % 2 != 0 || m.cols % 2 != 0 || m.rows == 0 || m.cols == 0 {
        return Err(Error::Dimension(format!(
            "cannot 2x2-pool a {}x{} matrix",
            m.rows, m.cols
        )));
    }
    let (or, oc) = (m.rows / 2, m.cols / 2);
    let mut data = Vec::with_capacity(or * oc);
    for a in 0..or {
        for b in 0..oc {
            let sum = m.get(2 * a, 2 * b)
                + m.get(2 * a, 2 * b + 1)
                + m.get(2 * a + 1, 2 * b)
                + m.get(2 * a + 1, 2 * b + 1);
            data.push(sum / 4.0);
        }
    }
    Matrix::new(or, oc, data)
}

/// Drops the first and last row and the first and last column.
pub fn trim_border(m: &Matrix) -> Result<Matrix> {
    if m.rows < 3 || m.cols < 3 {
        return Err(Error::Dimension(format!(
            "cannot trim a {}x{} matrix",
            m.rows, m.cols
        )));
    }
    let (or, oc) = (m.rows - 2, m.cols - 2);
    let mut data = Vec::with_capacity(or * oc);
    for r in 1..m.rows - 1 {
        let start = r * m.cols + 1;
        data.extend_from_slice(&m.data[start..start + oc]);
    }
    Matrix::new(or, oc, data)
}

/// Collapses an RGB image to one channel with the feature's weights.
pub fn apply_feature(spec: &FeatureSpec, img: &RgbImage) -> Matrix {
    let n = img.height * img.width;
    let mut data = Vec::with_capacity(n);
    let (rp, gp, bp) = (&img.planes[0], &img.planes[1], &img.planes[2]);
    for i in 0..n {
        data.push(spec.wr * rp[i] as f64 + spec.wg * gp[i] as f64 + spec.wb * bp[i] as f64);
    }
    Matrix {
        rows: img.height,
        cols: img.width,
        data,
    }
}

/// Affinely maps the feature's theoretical range [0, 255*S] onto [-1, 1],
/// where S is the feature's weight sum. Entries outside the range indicate
/// corrupt input and are rejected.
pub fn scale_to_unit(m: &Matrix, spec: &FeatureSpec) -> Result<Matrix> {
    let full = 255.0 * spec.weight_sum();
    let mut data = Vec::with_capacity(m.data.len());
    for &v in &m.data {
        if !((-RANGE_SLACK..=full + RANGE_SLACK).contains(&v)) {
            return Err(Error::Range(format!(
                "value {v} outside [0, {full}] for feature {}",
                spec.name
            )));
        }
        data.push((2.0 * v / full - 1.0).clamp(-1.0, 1.0));
    }
    Matrix::new(m.rows, m.cols, data)
}

/// The full preprocessing pipeline: feature weighting, 2x2 mean pooling,
/// one-pixel border trim, scaling to [-1, 1], row-major flattening.
/// A 64x64 image yields a 900-dimensional vector.
pub fn transform_image(spec: &FeatureSpec, img: &RgbImage) -> Result<FeatureVector> {
    let scaled = scale_to_unit(
        &trim_border(&downsample_mean(&apply_feature(spec, img))?)?,
        spec,
    )?;
    Ok(scaled.data)
}

/// Output length of the pipeline for an HxW input.
pub fn transformed_len(height: usize, width: usize) -> usize {
    (height / 2 - 2) * (width / 2 - 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn catalog_has_seventeen_rows() {
        let cat = catalog();
        assert_eq!(cat.len(), 17);
        let names: Vec<&str> = cat.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "R", "G", "B", "RGg1", "RBg1", "GBg1", "RGg2", "RBg2", "GBg2", "RG", "RB", "GB",
                "eRGB", "BW", "X", "Y", "Z"
            ]
        );
        for spec in cat {
            let s = spec.weight_sum();
            assert!(s > 0.0 && s <= MAX_WEIGHT_SUM + RANGE_SLACK, "{}", spec.name);
        }
        let ergb = catalog_spec("eRGB").unwrap();
        assert_eq!(ergb.wr, 1.0 / 3.0);
        let z = catalog_spec("Z").unwrap();
        assert_eq!((z.wr, z.wg, z.wb), (0.0193, 0.1192, 0.9502));
    }

    #[test]
    fn catalog_round_trips_exactly() {
        let parsed = import_catalog(catalog_text()).unwrap();
        assert_eq!(parsed, catalog());
        let mut out = Vec::new();
        export_catalog(&mut out).unwrap();
        assert_eq!(out, catalog_text().as_bytes());
    }

    #[test]
    fn spec_rejects_bad_weights() {
        assert!(FeatureSpec::new("neg", -0.1, 0.5, 0.0).is_err());
        assert!(FeatureSpec::new("zero", 0.0, 0.0, 0.0).is_err());
        assert!(FeatureSpec::new("big", 1.0, 1.0, 1.0).is_err());
        assert!(FeatureSpec::new("bad name", 0.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn downsample_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 2.0], vec![4.0, 6.0]]).unwrap();
        let d = downsample_mean(&m).unwrap();
        assert_eq!((d.rows(), d.cols()), (1, 1));
        assert_eq!(d.get(0, 0), 3.0);

        let c = Matrix::new(6, 8, vec![7.5; 48]).unwrap();
        let d = downsample_mean(&c).unwrap();
        assert!(d.data().iter().all(|&v| v == 7.5));

        let big = Matrix::new(64, 64, vec![0.0; 64 * 64]).unwrap();
        let d = downsample_mean(&big).unwrap();
        assert_eq!((d.rows(), d.cols()), (32, 32));

        let odd = Matrix::new(3, 4, vec![0.0; 12]).unwrap();
        assert!(matches!(downsample_mean(&odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn trim_examples() {
        let m = Matrix::new(32, 32, (0..32 * 32).map(|i| i as f64).collect()).unwrap();
        let t = trim_border(&m).unwrap();
        assert_eq!((t.rows(), t.cols()), (30, 30));
        assert_eq!(t.get(0, 0), m.get(1, 1));

        let m3 = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ])
        .unwrap();
        let t = trim_border(&m3).unwrap();
        assert_eq!((t.rows(), t.cols(), t.get(0, 0)), (1, 1, 5.0));

        let z = Matrix::new(4, 4, vec![0.0; 16]).unwrap();
        let t = trim_border(&z).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 2));
        assert!(t.data().iter().all(|&v| v == 0.0));

        let small = Matrix::new(2, 5, vec![0.0; 10]).unwrap();
        assert!(matches!(trim_border(&small), Err(Error::Dimension(_))));
    }

    #[test]
    fn apply_feature_examples() {
        let img = RgbImage::constant(4, 4, (100, 200, 50)).unwrap();

        let r = catalog_spec("R").unwrap();
        assert_eq!(apply_feature(r, &img).get(0, 0), 100.0);

        let ergb = catalog_spec("eRGB").unwrap();
        let gray = RgbImage::constant(4, 4, (137, 137, 137)).unwrap();
        let out = apply_feature(ergb, &gray);
        assert!((out.get(0, 0) - 137.0).abs() < 1e-12);

        let y = catalog_spec("Y").unwrap();
        let out = apply_feature(y, &img);
        assert!((out.get(0, 0) - 167.91).abs() < 1e-12);
    }

    #[test]
    fn scale_examples() {
        let spec = catalog_spec("Y").unwrap();
        let full = 255.0 * spec.weight_sum();
        let m = Matrix::new(2, 2, vec![0.0, full, full / 2.0, 1.0]).unwrap();
        let s = scale_to_unit(&m, spec).unwrap();
        assert_eq!(s.get(0, 0), -1.0);
        assert_eq!(s.get(0, 1), 1.0);
        assert!(s.get(1, 0).abs() < 1e-15);

        let bad = Matrix::new(1, 1, vec![full + 1.0]).unwrap();
        assert!(matches!(scale_to_unit(&bad, spec), Err(Error::Range(_))));
        let neg = Matrix::new(1, 1, vec![-1.0]).unwrap();
        assert!(matches!(scale_to_unit(&neg, spec), Err(Error::Range(_))));
    }

    #[test]
    fn transform_examples() {
        let img = RgbImage::from_fn(64, 64, |y, x| {
            let v = ((y * 64 + x) % 251) as u8;
            (v, v.wrapping_add(7), v.wrapping_add(13))
        })
        .unwrap();
        for spec in catalog() {
            let v = transform_image(spec, &img).unwrap();
            assert_eq!(v.len(), 900);
        }

        let black = RgbImage::constant(64, 64, (0, 0, 0)).unwrap();
        let v = transform_image(catalog_spec("BW").unwrap(), &black).unwrap();
        assert!(v.iter().all(|&e| e == -1.0));

        let white = RgbImage::constant(64, 64, (255, 255, 255)).unwrap();
        let ergb = catalog_spec("eRGB").unwrap(); // weight sum exactly 1
        let v = transform_image(ergb, &white).unwrap();
        assert!(v.iter().all(|&e| e == 1.0));
    }

    #[test]
    fn image_dimension_validation() {
        assert!(RgbImage::constant(3, 4, (0, 0, 0)).is_err());
        assert!(RgbImage::constant(4, 6, (0, 0, 0)).is_ok());
        assert!(RgbImage::constant(5, 5, (0, 0, 0)).is_err());
        assert!(RgbImage::new(4, 4, [vec![0; 16], vec![0; 16], vec![0; 15]]).is_err());
    }

    // Half-dimensions start at 3 so the pooled matrix is at least 3x3 and
    // survives the border trim.
    fn arb_image(max_half: usize) -> impl Strategy<Value = RgbImage> {
        (3..=max_half, 3..=max_half).prop_flat_map(|(hh, hw)| {
            let (h, w) = (2 * hh, 2 * hw);
            proptest::collection::vec(any::<(u8, u8, u8)>(), h * w).prop_map(move |px| {
                let mut it = px.iter();
                RgbImage::from_fn(h, w, |_, _| *it.next().unwrap()).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn pipeline_shape_law(img in arb_image(12)) {
            let spec = catalog_spec("BW").unwrap();
            let v = transform_image(spec, &img).unwrap();
            prop_assert_eq!(v.len(), transformed_len(img.height(), img.width()));
        }

        #[test]
        fn range_law(img in arb_image(8), idx in 0usize..17) {
            let spec = &catalog()[idx];
            let v = transform_image(spec, &img).unwrap();
            prop_assert!(v.iter().all(|&e| (-1.0..=1.0).contains(&e)));
        }

        #[test]
        fn apply_feature_is_linear(
            a in proptest::collection::vec(0u8..=120, 16),
            b in proptest::collection::vec(0u8..=120, 16),
            idx in 0usize..17,
        ) {
            let spec = &catalog()[idx];
            let ia = RgbImage::from_fn(4, 4, |y, x| { let v = a[y * 4 + x]; (v, v / 2, v / 3) }).unwrap();
            let ib = RgbImage::from_fn(4, 4, |y, x| { let v = b[y * 4 + x]; (v / 3, v, v / 2) }).unwrap();
            let isum = RgbImage::from_fn(4, 4, |y, x| {
                let (ar, ag, ab) = ia.pixel(y, x);
                let (br, bg, bb) = ib.pixel(y, x);
                (ar + br, ag + bg, ab + bb)
            }).unwrap();
            let fa = apply_feature(spec, &ia);
            let fb = apply_feature(spec, &ib);
            let fs = apply_feature(spec, &isum);
            for i in 0..16 {
                prop_assert!((fs.data()[i] - (fa.data()[i] + fb.data()[i])).abs() < 1e-9);
            }
        }
    }
}
