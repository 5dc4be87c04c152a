//! Dataset configuration, mask decoding and the multimodal JSONL builder.
//!
//! The builder only reads the files named by the manifest; it never opens a
//! network connection.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::template::{self, AttributeSelection, Vocabulary};
use crate::transcribe::{self, Connectivity, QuantityThresholds};
use crate::types::{ChangeClass, ChangeMask, Direction, Quantity, SemanticQuadruple};

/// How mask pixels map to class indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskEncoding {
    /// Pixel value (grayscale or palette index) is the class index.
    #[default]
    Index,
    /// Pixel colour is looked up in the palette's `rgb` table.
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteClass {
    /// Class index written into the label raster (non-zero).
    pub value: u16,
    pub category: String,
    #[serde(rename = "type")]
    pub change_type: String,
    /// Colour for RGB-encoded masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<[u8; 3]>,
}

/// Mapping from mask pixels to (category, change type).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    #[serde(default)]
    pub encoding: MaskEncoding,
    /// Colour that means "no change" in RGB masks.
    #[serde(default)]
    pub background: [u8; 3],
    #[serde(default)]
    pub classes: Vec<PaletteClass>,
}

impl Palette {
    pub fn validate(&self) -> Result<()> {
        let mut values = HashSet::new();
        let mut colours = HashSet::from([self.background]);
        for class in &self.classes {
            if class.value == 0 {
                return Err(Error::Config(
                    "palette value 0 is reserved for no-change".into(),
                ));
            }
            if !values.insert(class.value) {
                return Err(Error::Config(format!(
                    "palette value {} listed twice",
                    class.value
                )));
            }
            if self.encoding == MaskEncoding::Rgb {
                let rgb = class.rgb.ok_or_else(|| {
                    Error::Config(format!("palette value {} needs an rgb colour", class.value))
                })?;
                if !colours.insert(rgb) {
                    return Err(Error::Config(format!("colour {rgb:?} used twice")));
                }
            }
        }
        Ok(())
    }

    pub fn class_table(&self) -> Vec<ChangeClass> {
        self.classes
            .iter()
            .map(|c| ChangeClass::new(c.value, c.category.clone(), c.change_type.clone()))
            .collect()
    }

    fn lookup_rgb(&self, rgb: [u8; 3]) -> Option<u16> {
        if rgb == self.background {
            return Some(0);
        }
        self.classes
            .iter()
            .find(|c| c.rgb == Some(rgb))
            .map(|c| c.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryConfig {
    pub id: String,
    pub mask: PathBuf,
    #[serde(default)]
    pub pre: Option<PathBuf>,
    #[serde(default)]
    pub post: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSection {
    #[serde(default)]
    root: Option<PathBuf>,
    #[serde(default = "default_split")]
    split: String,
    #[serde(default)]
    mask_dir: Option<PathBuf>,
    #[serde(default)]
    pre_dir: Option<PathBuf>,
    #[serde(default)]
    post_dir: Option<PathBuf>,
    #[serde(default)]
    entries: Vec<EntryConfig>,
    #[serde(default)]
    connectivity: Connectivity,
    /// Number of masks checked against the palette at load time; 0 = all.
    #[serde(default = "default_scan")]
    palette_scan: usize,
}

fn default_split() -> String {
    "train".into()
}

fn default_scan() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplatesSection {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    categories: Vec<String>,
    #[serde(default)]
    change_types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributesSection {
    #[serde(default)]
    list: Option<String>,
    #[serde(default = "yes")]
    quantity: bool,
    #[serde(default = "yes", rename = "type")]
    change_type: bool,
    #[serde(default = "yes")]
    category: bool,
    #[serde(default = "yes")]
    location: bool,
}

fn yes() -> bool {
    true
}

impl Default for AttributesSection {
    fn default() -> Self {
        Self {
            list: None,
            quantity: true,
            change_type: true,
            category: true,
            location: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    dataset: DatasetSection,
    #[serde(default)]
    palette: Palette,
    #[serde(default)]
    thresholds: QuantityThresholds,
    #[serde(default)]
    templates: TemplatesSection,
    #[serde(default)]
    attributes: AttributesSection,
}

/// One bi-temporal sample with resolved paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub pre_image: Option<PathBuf>,
    pub post_image: Option<PathBuf>,
    pub mask: PathBuf,
}

/// A validated dataset description.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
    pub palette: Palette,
    pub thresholds: QuantityThresholds,
    pub attrs: AttributeSelection,
    pub seed: u64,
    pub vocabulary: Vocabulary,
    pub connectivity: Connectivity,
}

/// Reads and validates a TOML dataset configuration. Relative paths resolve
/// against `dataset.root`, which itself resolves against the config file's
/// directory.
pub fn load_manifest(config_path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(config_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(config_path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let config: ConfigFile = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    manifest_from_config(config, &base)
}

/// Parses configuration text with relative paths resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest> {
    let config: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    manifest_from_config(config, base)
}

fn manifest_from_config(config: ConfigFile, base: &Path) -> Result<DatasetManifest> {
    let ds = config.dataset;
    let root = match ds.root {
        Some(r) if r.is_absolute() => r,
        Some(r) => base.join(r),
        None => base.to_path_buf(),
    };
    config.palette.validate()?;
    config.thresholds.validate()?;

    let attrs = match config.attributes.list {
        Some(list) => AttributeSelection::parse_list(&list)?,
        None => AttributeSelection::new(
            config.attributes.quantity,
            config.attributes.change_type,
            config.attributes.category,
            config.attributes.location,
        ),
    };

    let mut vocabulary = Vocabulary {
        categories: Vec::new(),
        change_types: Vec::new(),
    };
    for class in &config.palette.classes {
        vocabulary.extend(
            std::slice::from_ref(&class.category),
            std::slice::from_ref(&class.change_type),
        );
    }
    vocabulary.extend(&config.templates.categories, &config.templates.change_types);
    vocabulary.validate()?;

    let mut entries = Vec::new();
    for e in &ds.entries {
        entries.push(ManifestEntry {
            image_id: e.id.clone(),
            pre_image: e.pre.as_ref().map(|p| root.join(p)),
            post_image: e.post.as_ref().map(|p| root.join(p)),
            mask: root.join(&e.mask),
        });
    }
    if let Some(mask_dir) = &ds.mask_dir {
        let dir = root.join(mask_dir);
        let listing = std::fs::read_dir(&dir).map_err(|_| Error::MissingFile(dir.clone()))?;
        let mut names: Vec<PathBuf> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        names.sort();
        for mask in names {
            let file_name = mask.file_name().expect("listed file").to_owned();
            let image_id = mask
                .file_stem()
                .expect("listed file")
                .to_string_lossy()
                .into_owned();
            entries.push(ManifestEntry {
                image_id,
                pre_image: ds.pre_dir.as_ref().map(|d| root.join(d).join(&file_name)),
                post_image: ds.post_dir.as_ref().map(|d| root.join(d).join(&file_name)),
                mask,
            });
        }
    }

    let mut ids = HashSet::new();
    for e in &entries {
        if !ids.insert(e.image_id.as_str()) {
            return Err(Error::Config(format!(
                "duplicate image id {:?}",
                e.image_id
            )));
        }
        for path in [Some(&e.mask), e.pre_image.as_ref(), e.post_image.as_ref()]
            .into_iter()
            .flatten()
        {
            if !path.is_file() {
                return Err(Error::MissingFile(path.clone()));
            }
        }
    }

    let manifest = DatasetManifest {
        root,
        split: ds.split,
        entries,
        palette: config.palette,
        thresholds: config.thresholds,
        attrs,
        seed: config.templates.seed,
        vocabulary,
        connectivity: ds.connectivity,
    };
    scan_palette(&manifest, ds.palette_scan)?;
    Ok(manifest)
}

/// Decodes an evenly spaced sample of masks so palette gaps surface at load
/// time rather than mid-build.
fn scan_palette(manifest: &DatasetManifest, sample: usize) -> Result<()> {
    let n = manifest.entries.len();
    if n == 0 {
        return Ok(());
    }
    let take = if sample == 0 { n } else { sample.min(n) };
    let picks: Vec<usize> = (0..take).map(|i| i * n / take).collect();
    for i in picks {
        read_mask(&manifest.entries[i].mask, &manifest.palette)?;
    }
    Ok(())
}

/// Raw decoded mask pixels.
enum RawPixels {
    Values(Vec<u16>),
    Rgb(Vec<[u8; 3]>),
}

fn decode_err(path: &Path, reason: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn unpack_line(line: &[u8], width: usize, depth: u8, out: &mut Vec<u16>) {
    match depth {
        16 => out.extend(
            line.chunks_exact(2)
                .take(width)
                .map(|b| u16::from_be_bytes([b[0], b[1]])),
        ),
        8 => out.extend(line.iter().take(width).map(|&b| b as u16)),
        bits => {
            let per_byte = 8 / bits as usize;
            let mask = (1u16 << bits) - 1;
            for x in 0..width {
                let byte = line[x / per_byte] as u16;
                let shift = 8 - bits as usize * (x % per_byte + 1);
                out.push((byte >> shift) & mask);
            }
        }
    }
}

fn decode_png(path: &Path) -> Result<(usize, usize, RawPixels)> {
    use png::{BitDepth, ColorType};
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => decode_err(path, e),
    })?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let depth = match info.bit_depth {
        BitDepth::One => 1,
        BitDepth::Two => 2,
        BitDepth::Four => 4,
        BitDepth::Eight => 8,
        BitDepth::Sixteen => 16,
    };
    let lines = buf.chunks(info.line_size).take(h);
    let pixels = match info.color_type {
        ColorType::Grayscale | ColorType::Indexed => {
            let mut values = Vec::with_capacity(w * h);
            for line in lines {
                unpack_line(line, w, depth, &mut values);
            }
            RawPixels::Values(values)
        }
        ColorType::Rgb | ColorType::Rgba if depth == 8 => {
            let channels = if info.color_type == ColorType::Rgb {
                3
            } else {
                4
            };
            let mut rgb = Vec::with_capacity(w * h);
            for line in lines {
                rgb.extend(
                    line.chunks_exact(channels)
                        .take(w)
                        .map(|p| [p[0], p[1], p[2]]),
                );
            }
            RawPixels::Rgb(rgb)
        }
        other => {
            return Err(decode_err(
                path,
                format!("unsupported mask format {other:?} at {depth} bits"),
            ))
        }
    };
    Ok((w, h, pixels))
}

/// Decodes a mask PNG and applies the palette.
pub fn read_mask(path: &Path, palette: &Palette) -> Result<ChangeMask> {
    let (w, h, pixels) = decode_png(path)?;
    let labels = match (pixels, palette.encoding) {
        (RawPixels::Values(values), MaskEncoding::Index) => {
            let known: HashSet<u16> = palette.classes.iter().map(|c| c.value).collect();
            if let Some(&v) = values.iter().find(|&&v| v != 0 && !known.contains(&v)) {
                return Err(Error::PaletteGap(v as u32));
            }
            values
        }
        (RawPixels::Rgb(rgb), MaskEncoding::Rgb) => {
            let mut labels = Vec::with_capacity(rgb.len());
            // masks use few colours; remember the last lookup
            let mut last: Option<([u8; 3], u16)> = None;
            for px in rgb {
                let v = match last {
                    Some((c, v)) if c == px => v,
                    _ => {
                        let v = palette.lookup_rgb(px).ok_or_else(|| {
                            Error::PaletteGap(u32::from_be_bytes([0, px[0], px[1], px[2]]))
                        })?;
                        last = Some((px, v));
                        v
                    }
                };
                labels.push(v);
            }
            labels
        }
        (RawPixels::Values(_), MaskEncoding::Rgb) => {
            return Err(decode_err(
                path,
                "palette expects RGB masks but file is single-channel",
            ))
        }
        (RawPixels::Rgb(_), MaskEncoding::Index) => {
            return Err(decode_err(
                path,
                "palette expects index masks but file is RGB",
            ))
        }
    };
    let mask = ChangeMask::new(w, h, labels, palette.class_table())?;
    debug_assert!(mask.validate().is_empty());
    Ok(mask)
}

/// Decodes a single-channel mask without a palette: pixel values are
/// returned as-is.
pub fn read_label_raster(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    match decode_png(path)? {
        (w, h, RawPixels::Values(values)) => Ok((w, h, values)),
        (_, _, RawPixels::Rgb(_)) => Err(decode_err(path, "expected a single-channel label mask")),
    }
}

/// Writes a single-channel 8-bit PNG (or 16-bit when any label exceeds 255).
pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[u16]) -> Result<()> {
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    let wide = labels.iter().any(|&l| l > 255);
    let data: Vec<u8> = if wide {
        enc.set_depth(png::BitDepth::Sixteen);
        labels.iter().flat_map(|l| l.to_be_bytes()).collect()
    } else {
        enc.set_depth(png::BitDepth::Eight);
        labels.iter().map(|&l| l as u8).collect()
    };
    let mut writer = enc.write_header().map_err(|e| decode_err(path, e))?;
    writer
        .write_image_data(&data)
        .map_err(|e| decode_err(path, e))?;
    writer.finish().map_err(|e| decode_err(path, e))?;
    Ok(())
}

/// One rendered sentence of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    /// `None` for the no-change sentence.
    pub class_index: Option<u16>,
    pub template_id: Option<u8>,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrupleRecord {
    pub class_index: u16,
    pub location: Direction,
    pub quantity: Quantity,
    pub category: String,
    pub change_type: String,
    pub pixel_count: usize,
    pub centroid: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_index: u16,
    pub pixel_count: usize,
    pub centroid: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub width: usize,
    pub height: usize,
    pub changed_pixels: usize,
    pub classes: Vec<ClassStats>,
}

/// One line of the multimodal JSONL output. Field order is the key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalRecord {
    pub image_id: String,
    pub split: String,
    pub seed: u64,
    pub attributes: String,
    pub pre_image: Option<String>,
    pub post_image: Option<String>,
    pub mask: String,
    pub description: String,
    pub sentences: Vec<SentenceRecord>,
    pub quadruples: Vec<QuadrupleRecord>,
    pub mask_stats: MaskStats,
}

/// Transcribes and describes one decoded mask.
pub fn describe_mask(
    image_id: &str,
    mask: &ChangeMask,
    thresholds: &QuantityThresholds,
    attrs: &AttributeSelection,
    seed: u64,
) -> (Vec<(u16, SemanticQuadruple)>, Vec<SentenceRecord>, String) {
    let paired = transcribe::transcribe_mask_indexed(mask, thresholds);
    let sentences: Vec<SentenceRecord> = if paired.is_empty() {
        vec![SentenceRecord {
            class_index: None,
            template_id: None,
            sentence: template::NO_CHANGE_SENTENCE.to_string(),
        }]
    } else {
        paired
            .iter()
            .map(|(idx, q)| {
                let text = template::describe(q, seed, image_id, *idx, attrs);
                SentenceRecord {
                    class_index: Some(*idx),
                    template_id: Some(text.template_id),
                    sentence: text.sentence,
                }
            })
            .collect()
    };
    let description = template::join_sentences(
        sentences
            .iter()
            .filter(|s| s.class_index.is_some())
            .map(|s| s.sentence.as_str()),
    );
    (paired, sentences, description)
}

fn display_path(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .to_string_lossy()
        .replace('\\', "/")
}

fn build_record(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<MultimodalRecord> {
    let mask = read_mask(&entry.mask, &manifest.palette)?;
    let (paired, sentences, description) = describe_mask(
        &entry.image_id,
        &mask,
        &manifest.thresholds,
        &manifest.attrs,
        manifest.seed,
    );
    let quadruples: Vec<QuadrupleRecord> = paired
        .iter()
        .map(|(idx, q)| QuadrupleRecord {
            class_index: *idx,
            location: q.location,
            quantity: q.quantity,
            category: q.category.clone(),
            change_type: q.change_type.clone(),
            pixel_count: q.pixel_count,
            centroid: [q.centroid.0, q.centroid.1],
        })
        .collect();
    let classes: Vec<ClassStats> = quadruples
        .iter()
        .map(|q| ClassStats {
            class_index: q.class_index,
            pixel_count: q.pixel_count,
            centroid: q.centroid,
        })
        .collect();
    Ok(MultimodalRecord {
        image_id: entry.image_id.clone(),
        split: manifest.split.clone(),
        seed: manifest.seed,
        attributes: manifest.attrs.to_list(),
        pre_image: entry
            .pre_image
            .as_deref()
            .map(|p| display_path(&manifest.root, p)),
        post_image: entry
            .post_image
            .as_deref()
            .map(|p| display_path(&manifest.root, p)),
        mask: display_path(&manifest.root, &entry.mask),
        description,
        mask_stats: MaskStats {
            width: mask.width(),
            height: mask.height(),
            changed_pixels: classes.iter().map(|c| c.pixel_count).sum(),
            classes,
        },
        sentences,
        quadruples,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryError {
    pub image_id: String,
    pub error: String,
}

/// Summary written next to the JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub split: String,
    pub seed: u64,
    pub attributes: String,
    pub entries: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub quadruples: usize,
    pub no_change_samples: usize,
    /// Keyed by `category|type`.
    pub per_class: BTreeMap<String, usize>,
    pub direction_histogram: BTreeMap<String, usize>,
    pub quantity_histogram: BTreeMap<String, usize>,
    pub template_histogram: BTreeMap<String, usize>,
    pub errors: Vec<EntryError>,
}

impl BuildReport {
    fn new(manifest: &DatasetManifest) -> Self {
        Self {
            split: manifest.split.clone(),
            seed: manifest.seed,
            attributes: manifest.attrs.to_list(),
            entries: manifest.entries.len(),
            succeeded: 0,
            failed: 0,
            quadruples: 0,
            no_change_samples: 0,
            per_class: BTreeMap::new(),
            direction_histogram: Direction::ALL.iter().map(|d| (d.to_string(), 0)).collect(),
            quantity_histogram: Quantity::ALL.iter().map(|q| (q.to_string(), 0)).collect(),
            template_histogram: (1..=template::TEMPLATE_COUNT)
                .map(|t| (t.to_string(), 0))
                .collect(),
            errors: Vec::new(),
        }
    }

    fn add(&mut self, record: &MultimodalRecord) {
        self.succeeded += 1;
        if record.quadruples.is_empty() {
            self.no_change_samples += 1;
        }
        for q in &record.quadruples {
            self.quadruples += 1;
            *self
                .per_class
                .entry(format!("{}|{}", q.category, q.change_type))
                .or_default() += 1;
            *self
                .direction_histogram
                .entry(q.location.to_string())
                .or_default() += 1;
            *self
                .quantity_histogram
                .entry(q.quantity.to_string())
                .or_default() += 1;
        }
        for s in &record.sentences {
            if let Some(t) = s.template_id {
                *self.template_histogram.entry(t.to_string()).or_default() += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildOptions {
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    /// Abort on the first failing entry (in manifest order).
    pub fail_fast: bool,
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub records: Vec<MultimodalRecord>,
    pub report: BuildReport,
}

pub(crate) fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Transcribes every entry. Entries run in parallel; records come back in
/// manifest order.
pub fn build_multimodal_dataset(
    manifest: &DatasetManifest,
    options: BuildOptions,
) -> Result<BuildOutput> {
    let pool = thread_pool(options.jobs)?;
    let results: Vec<Result<MultimodalRecord>> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| build_record(manifest, e))
            .collect()
    });

    let mut report = BuildReport::new(manifest);
    let mut records = Vec::with_capacity(results.len());
    for (entry, result) in manifest.entries.iter().zip(results) {
        match result {
            Ok(record) => {
                report.add(&record);
                records.push(record);
            }
            Err(e) if options.fail_fast => return Err(e),
            Err(e) => {
                report.failed += 1;
                report.errors.push(EntryError {
                    image_id: entry.image_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(BuildOutput { records, report })
}

/// Serializes records as newline-delimited JSON.
pub fn write_jsonl<W: Write>(mut out: W, records: &[MultimodalRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Paths of the files written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrittenFiles {
    pub jsonl: PathBuf,
    pub report: PathBuf,
}

/// Writes `<split>.mm.jsonl` and `<split>.report.json` into `out_dir`.
pub fn write_dataset(out_dir: &Path, output: &BuildOutput) -> Result<WrittenFiles> {
    std::fs::create_dir_all(out_dir)?;
    let split = &output.report.split;
    let jsonl = out_dir.join(format!("{split}.mm.jsonl"));
    let report = out_dir.join(format!("{split}.report.json"));
    write_jsonl(BufWriter::new(File::create(&jsonl)?), &output.records)?;
    let mut w = BufWriter::new(File::create(&report)?);
    serde_json::to_writer_pretty(&mut w, &output.report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(WrittenFiles { jsonl, report })
}

/// One problem found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntryIssue {
    pub image_id: String,
    pub issue: String,
}

fn check_entry(manifest: &DatasetManifest, entry: &ManifestEntry) -> Vec<EntryIssue> {
    let issue = |text: String| EntryIssue {
        image_id: entry.image_id.clone(),
        issue: text,
    };
    let mask = match read_mask(&entry.mask, &manifest.palette) {
        Ok(m) => m,
        Err(e) => return vec![issue(e.to_string())],
    };
    let mut issues: Vec<EntryIssue> = mask
        .validate()
        .iter()
        .map(|f| issue(f.to_string()))
        .collect();
    let dims = (mask.width() as u32, mask.height() as u32);
    for path in [entry.pre_image.as_ref(), entry.post_image.as_ref()]
        .into_iter()
        .flatten()
    {
        match image::image_dimensions(path) {
            Ok(d) if d == dims => {}
            Ok(d) => issues.push(issue(format!(
                "{} is {}x{} but the mask is {}x{}",
                path.display(),
                d.0,
                d.1,
                dims.0,
                dims.1
            ))),
            Err(e) => issues.push(issue(format!("{}: {e}", path.display()))),
        }
    }
    issues
}

/// Decodes every mask and checks it against the palette and its image pair.
pub fn validate_dataset(manifest: &DatasetManifest, jobs: usize) -> Result<Vec<EntryIssue>> {
    let pool = thread_pool(jobs)?;
    let issues: Vec<Vec<EntryIssue>> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| check_entry(manifest, e))
            .collect()
    });
    Ok(issues.into_iter().flatten().collect())
}

/// Per-class aggregates over a whole split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub class_index: u16,
    pub category: String,
    pub change_type: String,
    /// Samples containing the class.
    pub samples: usize,
    pub pixels: u64,
    /// Connected components over all samples.
    pub regions: usize,
    pub mean_region_area: f64,
    pub max_region_area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub split: String,
    pub entries: usize,
    pub no_change_samples: usize,
    pub total_pixels: u64,
    pub changed_pixels: u64,
    pub changed_fraction: f64,
    pub connectivity: Connectivity,
    pub classes: Vec<ClassSummary>,
    pub direction_histogram: BTreeMap<String, usize>,
    pub quantity_histogram: BTreeMap<String, usize>,
}

struct SampleStats {
    pixels: u64,
    // (class index, location, quantity, pixel count, region areas)
    classes: Vec<(u16, Direction, Quantity, usize, Vec<usize>)>,
}

fn sample_stats(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<SampleStats> {
    let mask = read_mask(&entry.mask, &manifest.palette)?;
    let quads = transcribe::transcribe_mask_indexed(&mask, &manifest.thresholds);
    let parts = mask.decompose();
    let classes = quads
        .into_iter()
        .map(|(idx, q)| {
            let areas = parts
                .iter()
                .find(|(c, _)| c.index == idx)
                .map(|(_, bin)| {
                    transcribe::region_stats(bin, manifest.connectivity)
                        .iter()
                        .map(|r| r.area)
                        .collect()
                })
                .unwrap_or_default();
            (idx, q.location, q.quantity, q.pixel_count, areas)
        })
        .collect();
    Ok(SampleStats {
        pixels: (mask.width() * mask.height()) as u64,
        classes,
    })
}

/// Computes split-level statistics. Fails on the first unreadable mask.
pub fn dataset_stats(manifest: &DatasetManifest, jobs: usize) -> Result<DatasetStats> {
    let pool = thread_pool(jobs)?;
    let samples: Vec<SampleStats> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| sample_stats(manifest, e))
            .collect::<Result<_>>()
    })?;

    let mut classes: Vec<ClassSummary> = manifest
        .palette
        .classes
        .iter()
        .map(|c| ClassSummary {
            class_index: c.value,
            category: c.category.clone(),
            change_type: c.change_type.clone(),
            samples: 0,
            pixels: 0,
            regions: 0,
            mean_region_area: 0.0,
            max_region_area: 0,
        })
        .collect();
    let mut direction_histogram: BTreeMap<String, usize> =
        Direction::ALL.iter().map(|d| (d.to_string(), 0)).collect();
    let mut quantity_histogram: BTreeMap<String, usize> =
        Quantity::ALL.iter().map(|q| (q.to_string(), 0)).collect();
    let (mut total_pixels, mut changed_pixels, mut no_change) = (0u64, 0u64, 0usize);
    for s in &samples {
        total_pixels += s.pixels;
        if s.classes.is_empty() {
            no_change += 1;
        }
        for (idx, location, quantity, count, areas) in &s.classes {
            changed_pixels += *count as u64;
            *direction_histogram.entry(location.to_string()).or_default() += 1;
            *quantity_histogram.entry(quantity.to_string()).or_default() += 1;
            if let Some(c) = classes.iter_mut().find(|c| c.class_index == *idx) {
                c.samples += 1;
                c.pixels += *count as u64;
                c.regions += areas.len();
                c.max_region_area = c
                    .max_region_area
                    .max(areas.iter().copied().max().unwrap_or(0));
            }
        }
    }
    for c in &mut classes {
        if c.regions > 0 {
            c.mean_region_area = c.pixels as f64 / c.regions as f64;
        }
    }
    Ok(DatasetStats {
        split: manifest.split.clone(),
        entries: manifest.entries.len(),
        no_change_samples: no_change,
        total_pixels,
        changed_pixels,
        changed_fraction: if total_pixels == 0 {
            0.0
        } else {
            changed_pixels as f64 / total_pixels as f64
        },
        connectivity: manifest.connectivity,
        classes,
        direction_histogram,
        quantity_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn palette() -> Palette {
        Palette {
            encoding: MaskEncoding::Index,
            background: [0, 0, 0],
            classes: vec![
                PaletteClass {
                    value: 1,
                    category: "buildings".into(),
                    change_type: "destroyed".into(),
                    rgb: Some([255, 0, 0]),
                },
                PaletteClass {
                    value: 2,
                    category: "greenhouse".into(),
                    change_type: "newly built".into(),
                    rgb: Some([0, 255, 0]),
                },
            ],
        }
    }

    fn write_rgb_png(path: &Path, w: usize, h: usize, rgb: &[[u8; 3]]) {
        let file = File::create(path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(&rgb.concat()).unwrap();
    }

    fn write_indexed_png(path: &Path, w: usize, h: usize, idx: &[u8], depth: png::BitDepth) {
        let file = File::create(path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(depth);
        enc.set_palette(vec![0, 0, 0, 255, 0, 0, 0, 255, 0]);
        let mut wr = enc.write_header().unwrap();
        let data: Vec<u8> = match depth {
            png::BitDepth::Eight => idx.to_vec(),
            png::BitDepth::Two => idx
                .chunks(w)
                .flat_map(|row| {
                    row.chunks(4)
                        .map(|c| {
                            c.iter()
                                .enumerate()
                                .fold(0u8, |b, (i, &v)| b | (v << (6 - 2 * i)))
                        })
                        .collect::<Vec<_>>()
                })
                .collect(),
            _ => unreachable!(),
        };
        wr.write_image_data(&data).unwrap();
    }

    #[test]
    fn read_blank_and_classes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("blank.png");
        write_label_png(&p, 4, 4, &[0; 16]).unwrap();
        let m = read_mask(&p, &palette()).unwrap();
        assert!(m.labels().iter().all(|&l| l == 0));
        assert!(transcribe::transcribe_mask(&m, &QuantityThresholds::default()).is_empty());

        let labels: Vec<u16> = (0..16).map(|i| (i % 3) as u16).collect();
        write_label_png(&p, 4, 4, &labels).unwrap();
        let m = read_mask(&p, &palette()).unwrap();
        assert_eq!(m.labels(), labels.as_slice());
        assert_eq!(m.class_table().len(), 2);
        assert!(m.validate().is_empty());
    }

    #[test]
    fn palette_gap_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gap.png");
        let mut labels = vec![0u16; 16];
        labels[9] = 7;
        write_label_png(&p, 4, 4, &labels).unwrap();
        assert!(matches!(
            read_mask(&p, &palette()),
            Err(Error::PaletteGap(7))
        ));
    }

    #[test]
    fn rgb_and_indexed_encodings_agree() {
        let dir = tempfile::tempdir().unwrap();
        let (w, h) = (8, 3);
        let idx: Vec<u8> = (0..w * h).map(|i| ((i * 7) % 3) as u8).collect();
        let colours = [[0, 0, 0], [255, 0, 0], [0, 255, 0]];
        let rgb: Vec<[u8; 3]> = idx.iter().map(|&i| colours[i as usize]).collect();

        let gray = dir.path().join("gray.png");
        write_label_png(
            &gray,
            w,
            h,
            &idx.iter().map(|&i| i as u16).collect::<Vec<_>>(),
        )
        .unwrap();
        let indexed = dir.path().join("indexed.png");
        write_indexed_png(&indexed, w, h, &idx, png::BitDepth::Eight);
        let packed = dir.path().join("packed.png");
        write_indexed_png(&packed, w, h, &idx, png::BitDepth::Two);
        let colour = dir.path().join("rgb.png");
        write_rgb_png(&colour, w, h, &rgb);

        let a = read_mask(&gray, &palette()).unwrap();
        assert_eq!(read_mask(&indexed, &palette()).unwrap(), a);
        assert_eq!(read_mask(&packed, &palette()).unwrap(), a);
        let rgb_palette = Palette {
            encoding: MaskEncoding::Rgb,
            ..palette()
        };
        assert_eq!(read_mask(&colour, &rgb_palette).unwrap(), a);

        // wrong encoding for the file type
        assert!(matches!(
            read_mask(&colour, &palette()),
            Err(Error::Decode { .. })
        ));
        let unknown = dir.path().join("unknown.png");
        write_rgb_png(&unknown, 1, 1, &[[1, 2, 3]]);
        assert!(matches!(
            read_mask(&unknown, &rgb_palette),
            Err(Error::PaletteGap(0x010203))
        ));
    }

    #[test]
    fn decode_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(
            read_mask(&p, &palette()),
            Err(Error::Decode { .. })
        ));
        assert!(matches!(
            read_mask(&dir.path().join("absent.png"), &palette()),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn palette_validation() {
        let mut p = palette();
        p.classes[1].value = 1;
        assert!(p.validate().is_err());
        let mut p = palette();
        p.classes[0].value = 0;
        assert!(p.validate().is_err());
        let mut p = Palette {
            encoding: MaskEncoding::Rgb,
            ..palette()
        };
        p.classes[0].rgb = None;
        assert!(p.validate().is_err());
    }

    #[test]
    fn describe_empty_mask() {
        let m = ChangeMask::blank(4, 4).unwrap();
        let (q, s, d) = describe_mask(
            "x",
            &m,
            &QuantityThresholds::default(),
            &AttributeSelection::ALL,
            0,
        );
        assert!(q.is_empty());
        assert_eq!(s.len(), 1);
        assert_eq!(d, template::NO_CHANGE_SENTENCE);
    }
}
