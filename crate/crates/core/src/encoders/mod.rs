//! Per-object codes consumed by the agents: image features, point-cloud
//! autoencoder latents, and word embeddings.
//!
//! Every downstream module accepts [`ObjectRepresentation`]s, so a synthetic
//! world can bypass pretrained backbones entirely with [`PassThrough`].

mod chamfer;
mod image;
mod pcae;
mod words;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use chamfer::chamfer_distance;
pub use image::{fit_image_encoder, BackboneSource, ImageClassifier, ImageFitConfig, ImageFitLog, IMAGENET_MEAN_RGB};
pub use pcae::{fit_pc_autoencoder, PcAeConfig, PcAeLog, PcAutoencoder};
pub use words::{WordEmbeddingTable, MISSING_ROW_LIMIT};

use crate::nn::Mat;
use crate::{util, Error, Result};

pub const POINTS_PER_CLOUD: usize = 2048;
pub const IMAGE_CODE_DIM: usize = 4096;
pub const PC_CODE_DIM: usize = 128;
pub const CONTEXT_PC_CODE_DIM: usize = 64;
pub const WORD_DIM: usize = 100;

/// Objects keyed by id.
pub type ObjectMap = BTreeMap<String, ObjectRepresentation>;

/// Which geometric codes an agent consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    PointCloud,
    #[default]
    Both,
}

impl Modality {
    pub fn uses_image(self) -> bool {
        matches!(self, Modality::Image | Modality::Both)
    }

    pub fn uses_cloud(self) -> bool {
        matches!(self, Modality::PointCloud | Modality::Both)
    }
}

/// Looks up every id, failing on the first unknown one.
pub fn resolve<'a>(objects: &'a ObjectMap, ids: &[String]) -> Result<Vec<&'a ObjectRepresentation>> {
    ids.iter().map(|id| objects.get(id).ok_or_else(|| Error::UnknownObject(id.clone()))).collect()
}

/// Stacks one code per object into a `k × d` matrix.
pub fn stack_codes(objects: &[&ObjectRepresentation], image: bool) -> Result<Mat> {
    let mut rows = Vec::with_capacity(objects.len());
    for o in objects {
        rows.push(if image { o.image_code()? } else { o.pc_code()? }.to_vec());
    }
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Invalid("objects carry codes of different lengths".into()));
    }
    Ok(Mat::from_rows(&rows))
}

/// Object surface samples, one point per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Mat,
}

impl PointCloud {
    pub fn new(points: Mat) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::EmptyCloud);
        }
        if points.cols() != 3 {
            return Err(Error::Invalid(format!("point clouds are N×3, got N×{}", points.cols())));
        }
        if !points.all_finite() {
            return Err(Error::NonFinite("point cloud".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    /// Checks the production sample count.
    pub fn is_standard(&self) -> bool {
        self.len() == POINTS_PER_CLOUD
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(util::read_matrix(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_matrix(path, &self.points)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    #[default]
    Render,
    Photo,
}

/// Row-major `height × width × channels` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    /// Value painted over removed pixels.
    #[serde(default)]
    pub background: f64,
    #[serde(default)]
    pub source: ImageSource,
}

impl Image {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn paint(&mut self, p: usize, value: f64) {
        let c = self.channels;
        self.data[p * c..(p + 1) * c].iter_mut().for_each(|x| *x = value);
    }

    /// An SVG document with one `scale`-sized square per pixel. Values are
    /// read as intensities in `[0, 1]`; one channel is grey, three are RGB.
    pub fn to_svg(&self, scale: usize) -> String {
        let (w, h) = (self.width * scale, self.height * scale);
        let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
        let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        for p in 0..self.pixel_count() {
            let px = self.pixel(p);
            let (r, g, b) = match px {
                [v] => (byte(*v), byte(*v), byte(*v)),
                [r, g, b, ..] => (byte(*r), byte(*g), byte(*b)),
                _ => (0, 0, 0),
            };
            let (x, y) = ((p % self.width) * scale, (p / self.width) * scale);
            out.push_str(&format!("<rect x=\"{x}\" y=\"{y}\" width=\"{scale}\" height=\"{scale}\" fill=\"#{r:02x}{g:02x}{b:02x}\"/>\n"));
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Pixel and point indices belonging to one named part.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartAnnotation {
    pub pixels: Vec<usize>,
    pub points: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRepresentation {
    pub object_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_code: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pc_code: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<Image>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<PointCloud>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parts: BTreeMap<String, PartAnnotation>,
}

impl ObjectRepresentation {
    pub fn from_codes(id: impl Into<String>, image_code: Option<Vec<f64>>, pc_code: Option<Vec<f64>>) -> Self {
        Self { object_id: id.into(), image_code, pc_code, image: None, cloud: None, parts: BTreeMap::new() }
    }

    pub fn image_code(&self) -> Result<&[f64]> {
        self.image_code
            .as_deref()
            .ok_or_else(|| Error::MissingCode { object: self.object_id.clone(), modality: "image" })
    }

    pub fn pc_code(&self) -> Result<&[f64]> {
        self.pc_code
            .as_deref()
            .ok_or_else(|| Error::MissingCode { object: self.object_id.clone(), modality: "point_cloud" })
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_code.is_none() && self.pc_code.is_none() {
            return Err(Error::Invalid(format!("object {} has neither an image nor a point-cloud code", self.object_id)));
        }
        for code in self.image_code.iter().chain(self.pc_code.iter()) {
            if code.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("codes of {}", self.object_id)));
            }
        }
        Ok(())
    }
}

/// Produces an image feature vector from pixels.
pub trait ImageFeatures: Send + Sync {
    fn features(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Produces a latent code from a point cloud.
pub trait CloudFeatures: Send + Sync {
    fn features(&self, cloud: &PointCloud) -> Result<Vec<f64>>;
}

/// Uses pixel values directly as the image code.
#[derive(Clone, Copy, Debug, Default)]
pub struct PassThrough;

impl ImageFeatures for PassThrough {
    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(image.data.clone())
    }
}

/// Fills object codes from raw assets. Modalities without a configured
/// extractor keep whatever code the object already carries.
#[derive(Default)]
pub struct ObjectEncoder {
    pub image: Option<Box<dyn ImageFeatures>>,
    pub cloud: Option<Box<dyn CloudFeatures>>,
}

impl ObjectEncoder {
    pub fn pass_through() -> Self {
        Self { image: Some(Box::new(PassThrough)), cloud: None }
    }

    pub fn encode(&self, obj: &ObjectRepresentation) -> Result<ObjectRepresentation> {
        let mut out = obj.clone();
        if let Some(enc) = &self.image {
            let img = obj
                .image
                .as_ref()
                .ok_or_else(|| Error::MissingCode { object: obj.object_id.clone(), modality: "image asset" })?;
            out.image_code = Some(enc.features(img)?);
        }
        if let Some(enc) = &self.cloud {
            let cloud = obj
                .cloud
                .as_ref()
                .ok_or_else(|| Error::MissingCode { object: obj.object_id.clone(), modality: "point-cloud asset" })?;
            out.pc_code = Some(enc.features(cloud)?);
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CachedCodes {
    object_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_code: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pc_code: Option<Vec<f64>>,
}

/// Object id → codes, persisted as line-delimited records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodeCache {
    entries: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)>,
}

impl CodeCache {
    pub fn insert(&mut self, obj: &ObjectRepresentation) {
        self.entries.insert(obj.object_id.clone(), (obj.image_code.clone(), obj.pc_code.clone()));
    }

    pub fn get(&self, id: &str) -> Option<ObjectRepresentation> {
        self.entries.get(id).map(|(i, p)| ObjectRepresentation::from_codes(id, i.clone(), p.clone()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn objects(&self) -> impl Iterator<Item = ObjectRepresentation> + '_ {
        self.entries.keys().filter_map(|k| self.get(k))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<CachedCodes> = self
            .entries
            .iter()
            .map(|(k, (i, p))| CachedCodes { object_id: k.clone(), image_code: i.clone(), pc_code: p.clone() })
            .collect();
        util::write_jsonl(path, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<CachedCodes> = util::read_jsonl(path)?;
        let mut cache = Self::default();
        for r in records {
            cache.entries.insert(r.object_id, (r.image_code, r.pc_code));
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj_with_image(pixels: Vec<f64>) -> ObjectRepresentation {
        let mut o = ObjectRepresentation::from_codes("x", None, Some(vec![0.5; 4]));
        o.image = Some(Image {
            width: pixels.len(),
            height: 1,
            channels: 1,
            data: pixels,
            background: 0.0,
            source: ImageSource::Render,
        });
        o
    }

    #[test]
    fn pass_through_is_identity_and_deterministic() {
        let obj = obj_with_image(vec![0.25, -1.0, 3.5]);
        let enc = ObjectEncoder::pass_through();
        let a = enc.encode(&obj).unwrap();
        let b = enc.encode(&obj).unwrap();
        assert_eq!(a.image_code.as_deref(), Some(&[0.25, -1.0, 3.5][..]));
        assert_eq!(a, b);
        assert_eq!(a.pc_code, obj.pc_code);
    }

    #[test]
    fn missing_asset_names_the_object() {
        let obj = ObjectRepresentation::from_codes("chair-17", None, Some(vec![1.0]));
        let err = ObjectEncoder::pass_through().encode(&obj).unwrap_err();
        assert!(err.to_string().contains("chair-17"), "{err}");
    }

    #[test]
    fn missing_modality_error() {
        let obj = ObjectRepresentation::from_codes("o", Some(vec![1.0]), None);
        assert!(matches!(obj.pc_code(), Err(Error::MissingCode { modality: "point_cloud", .. })));
        assert!(ObjectRepresentation::from_codes("o", None, None).validate().is_err());
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = CodeCache::default();
        cache.insert(&ObjectRepresentation::from_codes("a", Some(vec![1.0, 2.0]), None));
        cache.insert(&ObjectRepresentation::from_codes("b", None, Some(vec![3.0])));
        let p = dir.path().join("codes.jsonl");
        cache.save(&p).unwrap();
        assert_eq!(CodeCache::load(&p).unwrap(), cache);
    }

    #[test]
    fn cloud_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pc = PointCloud::new(Mat::from_vec(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5])).unwrap();
        let p = dir.path().join("cloud.txt");
        pc.save(&p).unwrap();
        assert_eq!(PointCloud::load(&p).unwrap(), pc);
        assert!(!pc.is_standard());
    }
}
