//! Model bundles: the per-stage model state and its single-file binary
//! container (little-endian, magic `PFB1`, length-prefixed sections).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierRole, PartClassifier};
use crate::error::{BundleError, Error, Result};
use crate::geometry::{BBox, NormalizedBox, Size};
use crate::location::{LocationModel, LocationTable};
use crate::pipeline::StageConfig;
use crate::raster::write_atomic;
use crate::viewpoint::{Viewpoint, ViewpointClassifier};

pub const MAGIC: &[u8; 4] = b"PFB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    T1,
    T2,
    T3,
}

impl Stage {
    fn code(self) -> u8 {
        self as u8 + 1
    }

    fn from_code(c: u8) -> Option<Stage> {
        [Stage::T1, Stage::T2, Stage::T3].get((c as usize).wrapping_sub(1)).copied()
    }
}

/// A training sample kept by reference: the box inside a curated instance
/// (mined at T2) or a hard-domain image (mined at T3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedRecord {
    pub source: String,
    pub bbox: BBox,
    /// Part id, or the part count for background.
    pub label: usize,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub stage: Stage,
    pub class_name: String,
    pub part_names: Vec<String>,
    pub appearance: PartClassifier,
    pub locations: Option<LocationTable>,
    pub viewpoint: Option<ViewpointClassifier>,
    /// Average object size per viewpoint.
    pub frames: [Size; Viewpoint::COUNT],
    pub root: Option<PartClassifier>,
    pub mined: Vec<MinedRecord>,
    pub config: StageConfig,
}

impl ModelBundle {
    pub fn part_count(&self) -> usize {
        self.part_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.appearance.part_count() != self.part_count() {
            return Err(Error::state("appearance classifier does not match the part list"));
        }
        match self.stage {
            Stage::T1 if self.locations.is_some() || self.viewpoint.is_some() => {
                Err(Error::state("a T1 bundle carries no location or viewpoint models"))
            }
            Stage::T2 | Stage::T3 if self.locations.is_none() || self.viewpoint.is_none() => {
                Err(Error::state("T2 and T3 bundles need location and viewpoint models"))
            }
            _ => Ok(()),
        }
    }

    /// Location density of `query` for `part` under viewpoint `v`.
    pub fn location_score(&self, part: usize, v: Viewpoint, query: &BBox, image: Size) -> Result<f64> {
        let table = self
            .locations
            .as_ref()
            .ok_or_else(|| Error::state(format!("a {:?} bundle has no location models", self.stage)))?;
        table
            .get(part, v)
            .ok_or_else(|| Error::invalid(format!("part {part} out of range")))?
            .score(query, image)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(self.stage.code());
        let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();

        let mut meta = Writer::default();
        meta.str(&self.class_name);
        meta.u32(self.part_names.len() as u32);
        for n in &self.part_names {
            meta.str(n);
        }
        for f in &self.frames {
            meta.f64(f.width);
            meta.f64(f.height);
        }
        sections.push((*b"META", meta.0));

        let conf = serde_json::to_string(&self.config).expect("config serializes");
        sections.push((*b"CONF", conf.into_bytes()));
        sections.push((*b"APPR", encode_classifier(&self.appearance)));
        if let Some(t) = &self.locations {
            sections.push((*b"LOCS", encode_locations(t)));
        }
        if let Some(v) = &self.viewpoint {
            sections.push((*b"VIEW", encode_classifier(&v.0)));
        }
        if let Some(r) = &self.root {
            sections.push((*b"ROOT", encode_classifier(r)));
        }
        let mut mine = Writer::default();
        mine.u32(self.mined.len() as u32);
        for m in &self.mined {
            mine.str(&m.source);
            mine.bbox(&m.bbox);
            mine.u32(m.label as u32);
            mine.u8(m.stage.code());
        }
        sections.push((*b"MINE", mine.0));

        w.u32(sections.len() as u32);
        for (tag, payload) in sections {
            w.bytes(&tag);
            w.u64(payload.len() as u64);
            w.bytes(&payload);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
        let mut r = Reader::new(bytes);
        if bytes.len() < 4 && MAGIC.starts_with(bytes) {
            return Err(corrupt("truncated inside the magic bytes"));
        }
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(BundleError::BadMagic.into());
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(BundleError::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            }
            .into());
        }
        let stage = Stage::from_code(r.u8()?).ok_or_else(|| corrupt("unknown stage tag"))?;
        let count = r.u32()?;
        let mut meta = None;
        let mut config = None;
        let mut appearance = None;
        let mut locations = None;
        let mut viewpoint = None;
        let mut root = None;
        let mut mined = None;
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
            let len = r.u64()? as usize;
            let mut s = Reader::new(r.take(len)?);
            match &tag {
                b"META" => {
                    let class_name = s.str()?;
                    let n = s.u32()? as usize;
                    let names = (0..n).map(|_| s.str()).collect::<Result<Vec<_>>>()?;
                    let mut frames = [Size::new(0.0, 0.0); Viewpoint::COUNT];
                    for f in &mut frames {
                        *f = Size::new(s.f64()?, s.f64()?);
                    }
                    meta = Some((class_name, names, frames));
                }
                b"CONF" => {
                    let text = std::str::from_utf8(s.rest()).map_err(|_| corrupt("config is not UTF-8"))?;
                    config = Some(serde_json::from_str::<StageConfig>(text).map_err(|e| corrupt(&format!("config: {e}")))?);
                }
                b"APPR" => appearance = Some(decode_classifier(&mut s)?),
                b"LOCS" => locations = Some(decode_locations(&mut s)?),
                b"VIEW" => viewpoint = Some(ViewpointClassifier(decode_classifier(&mut s)?)),
                b"ROOT" => root = Some(decode_classifier(&mut s)?),
                b"MINE" => {
                    let n = s.u32()? as usize;
                    let mut recs = Vec::with_capacity(n.min(1 << 20));
                    for _ in 0..n {
                        recs.push(MinedRecord {
                            source: s.str()?,
                            bbox: s.bbox()?,
                            label: s.u32()? as usize,
                            stage: Stage::from_code(s.u8()?).ok_or_else(|| corrupt("unknown record stage"))?,
                        });
                    }
                    mined = Some(recs);
                }
                _ => return Err(corrupt(&format!("unknown section {:?}", String::from_utf8_lossy(&tag)))),
            }
            if !s.done() {
                return Err(corrupt(&format!("trailing bytes in section {}", String::from_utf8_lossy(&tag))));
            }
        }
        if !r.done() {
            return Err(corrupt("trailing bytes after the last section"));
        }
        let (class_name, part_names, frames) = meta.ok_or_else(|| corrupt("missing META section"))?;
        let b = ModelBundle {
            stage,
            class_name,
            part_names,
            appearance: appearance.ok_or_else(|| corrupt("missing APPR section"))?,
            locations,
            viewpoint,
            frames,
            root,
            mined: mined.ok_or_else(|| corrupt("missing MINE section"))?,
            config: config.ok_or_else(|| corrupt("missing CONF section"))?,
        };
        b.validate().map_err(|e| corrupt(&e.to_string()))?;
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<ModelBundle> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn corrupt(msg: &str) -> Error {
    BundleError::Corrupt(msg.to_string()).into()
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn bbox(&mut self, b: &BBox) {
        for v in [b.x_min, b.y_min, b.x_max, b.y_max] {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("string is not UTF-8"))
    }
    fn bbox(&mut self) -> Result<BBox> {
        Ok(BBox {
            x_min: self.f64()?,
            y_min: self.f64()?,
            x_max: self.f64()?,
            y_max: self.f64()?,
        })
    }
}

fn encode_classifier(c: &PartClassifier) -> Vec<u8> {
    let mut w = Writer::default();
    w.u8(c.role.code());
    w.u32(c.class_count as u32);
    w.u32(c.dim as u32);
    w.u8(c.has_background_class as u8);
    for &v in c.weights.iter().chain(&c.bias) {
        w.f64(v);
    }
    w.0
}

fn decode_classifier(r: &mut Reader) -> Result<PartClassifier> {
    let role = ClassifierRole::from_code(r.u8()?).ok_or_else(|| corrupt("unknown classifier role"))?;
    let class_count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let has_background_class = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(corrupt("bad background flag")),
    };
    let n = class_count.checked_mul(dim).ok_or_else(|| corrupt("classifier too large"))?;
    if n.saturating_add(class_count).saturating_mul(8) > r.buf.len() - r.pos {
        return Err(corrupt("classifier parameters truncated"));
    }
    let mut c = PartClassifier::zeros(role, class_count, dim, has_background_class);
    for v in c.weights.iter_mut().chain(c.bias.iter_mut()) {
        *v = r.f64()?;
    }
    Ok(c)
}

fn encode_locations(t: &LocationTable) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(t.parts as u32);
    for m in t.models() {
        w.f64(m.bandwidth);
        w.f64(m.frame.width);
        w.f64(m.frame.height);
        w.u32(m.samples.len() as u32);
        for s in &m.samples {
            w.bbox(&s.0);
        }
    }
    w.0
}

fn decode_locations(r: &mut Reader) -> Result<LocationTable> {
    let parts = r.u32()? as usize;
    let mut models = Vec::new();
    for _ in 0..parts.saturating_mul(Viewpoint::COUNT) {
        let bandwidth = r.f64()?;
        let frame = Size::new(r.f64()?, r.f64()?);
        let n = r.u32()? as usize;
        if n.saturating_mul(32) > r.buf.len() - r.pos {
            return Err(corrupt("location samples truncated"));
        }
        let samples = (0..n).map(|_| r.bbox().map(NormalizedBox)).collect::<Result<Vec<_>>>()?;
        models.push(LocationModel {
            samples,
            bandwidth,
            frame,
        });
    }
    LocationTable::from_models(parts, models).map_err(|e| corrupt(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureVector, FEATURE_LEN};
    use crate::location::build_location_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_classifier(rng: &mut ChaCha8Rng, role: ClassifierRole, k: usize, bg: bool) -> PartClassifier {
        let mut c = PartClassifier::zeros(role, k, FEATURE_LEN, bg);
        for v in c.weights.iter_mut().chain(c.bias.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        c
    }

    pub(crate) fn sample_bundle(stage: Stage) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frame = Size::new(80.0, 60.0);
        let mut locations = LocationTable::new(2, 0.5, [frame; 4]);
        let m = build_location_model(&[(BBox::new(1.0, 2.0, 30.0, 40.0).unwrap(), frame)], 0.5, frame).unwrap();
        locations.set(1, Viewpoint::Back, m).unwrap();
        let staged = stage != Stage::T1;
        ModelBundle {
            stage,
            class_name: "thing".into(),
            part_names: vec!["a".into(), "b".into()],
            appearance: random_classifier(&mut rng, ClassifierRole::A2, if staged { 3 } else { 2 }, staged),
            locations: staged.then_some(locations),
            viewpoint: staged.then(|| ViewpointClassifier(random_classifier(&mut rng, ClassifierRole::Viewpoint, 4, false))),
            frames: [frame, frame, Size::new(100.0, 50.0), frame],
            root: staged.then(|| random_classifier(&mut rng, ClassifierRole::Root, 2, true)),
            mined: vec![MinedRecord {
                source: "objects/x.ppm#0".into(),
                bbox: BBox::new(1.0, 1.0, 5.5, 6.0).unwrap(),
                label: 2,
                stage: Stage::T2,
            }],
            config: StageConfig::default(),
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        for stage in [Stage::T1, Stage::T2, Stage::T3] {
            let b = sample_bundle(stage);
            let bytes = b.to_bytes();
            let back = ModelBundle::from_bytes(&bytes).unwrap();
            assert_eq!(back, b);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn probe_scores_identical_after_disk_roundtrip() {
        let b = sample_bundle(Stage::T3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pfb");
        b.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let f = FeatureVector((0..FEATURE_LEN).map(|_| rng.gen_range(0.0..1.0)).collect());
            assert_eq!(b.appearance.score(&f).unwrap(), back.appearance.score(&f).unwrap());
        }
    }

    #[test]
    fn corrupt_inputs_are_distinguished() {
        let bytes = sample_bundle(Stage::T2).to_bytes();
        assert!(matches!(
            ModelBundle::from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::Bundle(BundleError::Corrupt(_)))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelBundle::from_bytes(&bad), Err(Error::Bundle(BundleError::BadMagic))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            ModelBundle::from_bytes(&bad),
            Err(Error::Bundle(BundleError::VersionMismatch { expected: 1, found: 9 }))
        ));
        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(ModelBundle::from_bytes(&bad), Err(Error::Bundle(BundleError::Corrupt(_)))));
    }

    #[test]
    fn t1_bundle_refuses_location_queries() {
        let b = sample_bundle(Stage::T1);
        let q = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert!(matches!(
            b.location_score(0, Viewpoint::Front, &q, Size::new(80.0, 60.0)),
            Err(Error::InvalidState(_))
        ));
        let t2 = sample_bundle(Stage::T2);
        assert!(matches!(
            t2.location_score(0, Viewpoint::Front, &q, Size::new(80.0, 60.0)),
            Err(Error::InvalidState(_))
        ));
        assert_eq!(t2.location_score(1, Viewpoint::Back, &BBox::new(1.0, 2.0, 30.0, 40.0).unwrap(), Size::new(80.0, 60.0)).unwrap(), 1.0);
    }
}
