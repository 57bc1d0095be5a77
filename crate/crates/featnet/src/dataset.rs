//! Labeled image datasets: ingestion, label modularization, submodule
//! splits, featured-batch materialization, double-label auditing, and the
//! evaluation batch partition.
//!
//! The canonical item ordering is (global label, image id) lexicographic;
//! every partition here is a contiguous slice of some canonical ordering so
//! that splits are reproducible.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{transform_image, FeatureSpec, FeatureVector, RgbImage};

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: String,
    pub image: RgbImage,
    pub label: u32,
}

/// An immutable labeled dataset with `label_count` distinct classes.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    items: Vec<DatasetItem>,
    label_count: u32,
}

impl LabeledDataset {
    pub fn new(items: Vec<DatasetItem>, label_count: u32) -> Result<Self> {
        if label_count == 0 {
            return Err(Error::Domain("label_count must be positive".into()));
        }
        let mut seen = HashMap::new();
        for item in &items {
            if item.label >= label_count {
                return Err(Error::Domain(format!(
                    "label {} of image {:?} outside [0, {})",
                    item.label, item.id, label_count
                )));
            }
            if seen.insert(item.id.clone(), ()).is_some() {
                return Err(Error::Data(format!("duplicate image id {:?}", item.id)));
            }
        }
        Ok(Self { items, label_count })
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn label_count(&self) -> u32 {
        self.label_count
    }

    /// Items sorted by (global label, image id).
    pub fn canonical_items(&self) -> Vec<&DatasetItem> {
        let mut refs: Vec<&DatasetItem> = self.items.iter().collect();
        refs.sort_by(|a, b| (a.label, a.id.as_str()).cmp(&(b.label, b.id.as_str())));
        refs
    }
}

/// Module geometry: `k` label modules of `label_count / k` labels each and
/// `r` submodule splits per module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleAssignment {
    pub k: u32,
    pub r: u32,
    pub label_count: u32,
}

impl ModuleAssignment {
    pub fn new(k: u32, r: u32, label_count: u32) -> Result<Self> {
        if k == 0 || r == 0 {
            return Err(Error::Config("k and r must be positive".into()));
        }
        if label_count % k != 0 {
            return Err(Error::Config(format!(
                "k = {k} does not divide label count {label_count}"
            )));
        }
        Ok(Self { k, r, label_count })
    }

    pub fn labels_per_module(&self) -> u32 {
        self.label_count / self.k
    }
}

/// Maps a global label to its (1-based) module and local label.
pub fn module_of_label(global: u32, k: u32, label_count: u32) -> Result<(u32, u32)> {
    if k == 0 || label_count % k != 0 {
        return Err(Error::Config(format!(
            "k = {k} does not divide label count {label_count}"
        )));
    }
    if global >= label_count {
        return Err(Error::Domain(format!(
            "label {global} outside [0, {label_count})"
        )));
    }
    let per = label_count / k;
    Ok((global / per + 1, global % per))
}

/// Inverse of [`module_of_label`].
pub fn global_label(module: u32, local: u32, k: u32, label_count: u32) -> u32 {
    (module - 1) * (label_count / k) + local
}

/// All items of one label module, in canonical (label, id) order.
#[derive(Debug, Clone)]
pub struct ModuleBatch<'a> {
    pub module: u32,
    pub items: Vec<&'a DatasetItem>,
}

/// Partitions the dataset into `k` module batches by label block.
pub fn modularize(ds: &LabeledDataset, k: u32) -> Result<Vec<ModuleBatch<'_>>> {
    let assignment = ModuleAssignment::new(k, 1, ds.label_count())?;
    let mut batches: Vec<ModuleBatch> = (1..=k)
        .map(|j| ModuleBatch {
            module: j,
            items: Vec::new(),
        })
        .collect();
    for item in ds.canonical_items() {
        let (j, _) = module_of_label(item.label, assignment.k, assignment.label_count)?;
        batches[(j - 1) as usize].items.push(item);
    }
    Ok(batches)
}

/// Splits a module batch into `r` near-equal contiguous subsets of its
/// id-sorted ordering. Subset sizes differ by at most one.
pub fn split_submodules<'a>(batch: &ModuleBatch<'a>, r: u32) -> Result<Vec<Vec<&'a DatasetItem>>> {
    if r == 0 {
        return Err(Error::Config("r must be positive".into()));
    }
    let n = batch.items.len();
    if r as usize > n {
        return Err(Error::Config(format!(
            "r = {r} exceeds batch size {n} of module {}",
            batch.module
        )));
    }
    let mut ordered: Vec<&DatasetItem> = batch.items.clone();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(contiguous_chunks(&ordered, r as usize))
}

/// First `n % parts` chunks get the extra element.
fn contiguous_chunks<'a>(items: &[&'a DatasetItem], parts: usize) -> Vec<Vec<&'a DatasetItem>> {
    let n = items.len();
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// The training inputs of one (feature, module, submodule) cell.
///
/// `ids` is in-memory provenance for conflict reports; the cache file format
/// does not persist it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturedBatch {
    pub feature: usize,
    pub module: u32,
    pub submodule: u32,
    pub ids: Vec<String>,
    pub inputs: Vec<FeatureVector>,
    pub labels: Vec<u32>,
}

impl FeaturedBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

/// Transforms a submodule's items into input vectors with local labels.
#[allow(clippy::too_many_arguments)]
pub fn materialize_featured_batch(
    items: &[&DatasetItem],
    spec: &FeatureSpec,
    feature: usize,
    module: u32,
    submodule: u32,
    k: u32,
    label_count: u32,
) -> Result<FeaturedBatch> {
    let mut ids = Vec::with_capacity(items.len());
    let mut inputs = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for item in items {
        let (j, local) = module_of_label(item.label, k, label_count)?;
        if j != module {
            return Err(Error::Domain(format!(
                "image {:?} with label {} belongs to module {j}, not {module}",
                item.id, item.label
            )));
        }
        ids.push(item.id.clone());
        inputs.push(transform_image(spec, &item.image)?);
        labels.push(local);
    }
    Ok(FeaturedBatch {
        feature,
        module,
        submodule,
        ids,
        inputs,
        labels,
    })
}

/// Two batch entries whose quantized inputs coincide while labels differ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelConflict {
    pub feature: usize,
    pub first_id: String,
    pub second_id: String,
    pub digest: String,
    pub first_label: u32,
    pub second_label: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConflictReport {
    pub conflicts: Vec<LabelConflict>,
}

impl ConflictReport {
    pub fn is_empty(&self) -> bool {
        self.conflicts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.conflicts.len()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Rounds to `decimals` fractional digits, half to even, onto an integer grid.
fn quantize_grid(v: f64, scale: f64) -> i64 {
    (v * scale).round_ties_even() as i64
}

/// Reports every pair of batch entries whose input vectors are identical
/// after rounding to `decimals` fractional digits while their labels differ.
/// An empty report means the quantized batch defines a function.
pub fn scan_double_labels(fb: &FeaturedBatch, decimals: u8) -> ConflictReport {
    assert!(decimals >= 1, "quantization needs at least one digit");
    let scale = 10f64.powi(decimals as i32);
    let mut groups: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for (t, input) in fb.inputs.iter().enumerate() {
        let key: Vec<i64> = input.iter().map(|&v| quantize_grid(v, scale)).collect();
        groups.entry(key).or_default().push(t);
    }
    let mut conflicts = Vec::new();
    for (key, members) in &groups {
        if members.len() < 2 {
            continue;
        }
        let mut digest = None;
        for (a_pos, &a) in members.iter().enumerate() {
            for &b in &members[a_pos + 1..] {
                if fb.labels[a] == fb.labels[b] {
                    continue;
                }
                let digest = digest
                    .get_or_insert_with(|| {
                        let mut bytes = Vec::with_capacity(key.len() * 8);
                        for g in key {
                            bytes.extend_from_slice(&g.to_le_bytes());
                        }
                        format!("{:016x}", fnv1a64(&bytes))
                    })
                    .clone();
                let (first, second) = if fb.ids[a] <= fb.ids[b] { (a, b) } else { (b, a) };
                conflicts.push(LabelConflict {
                    feature: fb.feature,
                    first_id: fb.ids[first].clone(),
                    second_id: fb.ids[second].clone(),
                    digest,
                    first_label: fb.labels[first],
                    second_label: fb.labels[second],
                });
            }
        }
    }
    conflicts.sort_by(|a, b| {
        (&a.first_id, &a.second_id, a.first_label).cmp(&(&b.first_id, &b.second_id, b.first_label))
    });
    ConflictReport { conflicts }
}

/// Splits the dataset into `b` contiguous near-equal batches of the
/// canonical (label, id) ordering.
pub fn partition_eval_batches(ds: &LabeledDataset, b: usize) -> Result<Vec<Vec<&DatasetItem>>> {
    if b == 0 {
        return Err(Error::Config("batch count must be positive".into()));
    }
    if b > ds.len() {
        return Err(Error::Config(format!(
            "batch count {b} exceeds dataset size {}",
            ds.len()
        )));
    }
    Ok(contiguous_chunks(&ds.canonical_items(), b))
}

// ---------------------------------------------------------------------------
// Ingestion: CSV manifest + PNG directory
// ---------------------------------------------------------------------------

/// Loads a dataset from a CSV manifest with header `id,filename,label`.
/// Filenames are resolved relative to the manifest's directory.
pub fn load_manifest_dataset(manifest: &Path, label_count: u32) -> Result<LabeledDataset> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(manifest)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", manifest.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("manifest header: {e}")))?
        .clone();
    let expect = ["id", "filename", "label"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(Error::Parse(format!(
            "manifest header must be `id,filename,label`, got {headers:?}"
        )));
    }
    let mut items = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("manifest row {}: {e}", row + 2)))?;
        if record.len() != 3 {
            return Err(Error::Parse(format!(
                "manifest row {}: expected 3 fields",
                row + 2
            )));
        }
        let id = record[0].to_string();
        let path = dir.join(&record[1]);
        let label: u32 = record[2]
            .parse()
            .map_err(|_| Error::Parse(format!("manifest row {}: bad label", row + 2)))?;
        items.push(DatasetItem {
            id,
            image: load_png(&path)?,
            label,
        });
    }
    LabeledDataset::new(items, label_count)
}

fn load_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot load {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = [
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
    ];
    for px in img.pixels() {
        planes[0].push(px[0]);
        planes[1].push(px[1]);
        planes[2].push(px[2]);
    }
    RgbImage::new(h, w, planes)
}

// ---------------------------------------------------------------------------
// Binary tensor file (FNB1): magic, u32{count, H, W}, count * (H*W*3) pixel
// bytes (per image: R plane, G plane, B plane, row-major), count u16 labels.
// ---------------------------------------------------------------------------

const TENSOR_MAGIC: &[u8; 4] = b"FNB1";

pub fn write_tensor_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let (h, w) = match ds.items().first() {
        Some(item) => (item.image.height(), item.image.width()),
        None => (0, 0),
    };
    for item in ds.items() {
        if item.image.height() != h || item.image.width() != w {
            return Err(Error::Data(format!(
                "tensor file needs uniform dimensions; {:?} is {}x{}",
                item.id,
                item.image.height(),
                item.image.width()
            )));
        }
        if item.label > u16::MAX as u32 {
            return Err(Error::Data(format!("label {} exceeds u16", item.label)));
        }
    }
    let mut w_out = BufWriter::new(std::fs::File::create(path)?);
    w_out.write_all(TENSOR_MAGIC)?;
    w_out.write_all(&(ds.len() as u32).to_le_bytes())?;
    w_out.write_all(&(h as u32).to_le_bytes())?;
    w_out.write_all(&(w as u32).to_le_bytes())?;
    for item in ds.items() {
        for c in 0..3 {
            w_out.write_all(item.image.plane(c))?;
        }
    }
    for item in ds.items() {
        w_out.write_all(&(item.label as u16).to_le_bytes())?;
    }
    w_out.flush()?;
    Ok(())
}

pub fn read_tensor_dataset(path: &Path, label_count: u32) -> Result<LabeledDataset> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Parse(format!(
            "{}: bad magic, not an FNB1 file",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let mut planes = [vec![0u8; h * w], vec![0u8; h * w], vec![0u8; h * w]];
        for plane in planes.iter_mut() {
            r.read_exact(plane)?;
        }
        images.push(RgbImage::new(h, w, planes)?);
    }
    let mut items = Vec::with_capacity(count);
    for (idx, image) in images.into_iter().enumerate() {
        let mut buf = [0u8; 2];
        r.read_exact(&mut buf)?;
        items.push(DatasetItem {
            id: format!("img{idx:06}"),
            image,
            label: u16::from_le_bytes(buf) as u32,
        });
    }
    LabeledDataset::new(items, label_count)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

// ---------------------------------------------------------------------------
// Featured-batch cache (FVB1): magic, u32{count, dim}, count * dim f32
// little-endian values, count u16 local labels. Ids are not persisted;
// loads use positional ids.
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"FVB1";

pub fn write_featured_cache(path: &Path, fb: &FeaturedBatch) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(fb.len() as u32).to_le_bytes())?;
    w.write_all(&(fb.dim() as u32).to_le_bytes())?;
    for input in &fb.inputs {
        for &v in input {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    for &label in &fb.labels {
        if label > u16::MAX as u32 {
            return Err(Error::Data(format!("local label {label} exceeds u16")));
        }
        w.write_all(&(label as u16).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_featured_cache(
    path: &Path,
    feature: usize,
    module: u32,
    submodule: u32,
) -> Result<FeaturedBatch> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Parse(format!(
            "{}: bad magic, not an FVB1 file",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let mut inputs = Vec::with_capacity(count);
    for _ in 0..count {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            row.push(f32::from_le_bytes(buf) as f64);
        }
        inputs.push(row);
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut buf = [0u8; 2];
        r.read_exact(&mut buf)?;
        labels.push(u16::from_le_bytes(buf) as u32);
    }
    Ok(FeaturedBatch {
        feature,
        module,
        submodule,
        ids: (0..count).map(|t| t.to_string()).collect(),
        inputs,
        labels,
    })
}
