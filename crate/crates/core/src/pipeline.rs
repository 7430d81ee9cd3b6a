//! Stage orchestration: curation (T0), part-only appearance (T1), location,
//! viewpoint and mining on object images (T2), and refinement on the hard
//! domain (T3).

use log::{info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{MinedRecord, ModelBundle, Stage};
use crate::classifier::{train_classifier, train_classifier_from, ClassifierRole, ClassifierSpec, PartClassifier, Sample, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureVector};
use crate::fitting::{fit_instance_boxes, FitConfig};
use crate::geometry::{iou, BBox, Size};
use crate::location::{build_location_model, harvest_from_scores, HarvestConfig, LocationModel, LocationTable, ScoredProposals};
use crate::manifest::{DatasetManifest, HardDomainEntry, ObjectSetKey};
use crate::mining::{mine_from_scores, part_sized, MinedSet, MiningConfig, MiningImage};
use crate::proposals::{generate_proposals_for, ProposalConfig, ProposalSet};
use crate::raster::Raster;
use crate::store::ImageStore;
use crate::viewpoint::{predict_viewpoint, split_side_views, train_viewpoint_from_features, Viewpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Caps {
    pub objects_per_viewpoint: usize,
    pub images_per_part: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            objects_per_viewpoint: 100,
            images_per_part: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub caps: Caps,
    pub fit: FitConfig,
    pub train: TrainConfig,
    pub harvest: HarvestConfig,
    pub mining: MiningConfig,
    pub bandwidth: f64,
    /// Train on whole images instead of fitted boxes (the A0 baseline).
    pub bypass_fitting: bool,
    /// Start the T3 appearance model from the T2 weights.
    pub warm_start_t3: bool,
    /// Background proposals sampled per hard-domain image for the root filter.
    pub root_negatives_per_image: usize,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            caps: Caps::default(),
            fit: FitConfig::default(),
            train: TrainConfig::default(),
            harvest: HarvestConfig::default(),
            mining: MiningConfig::default(),
            bandwidth: crate::location::DEFAULT_BANDWIDTH,
            bypass_fitting: false,
            warm_start_t3: false,
            root_negatives_per_image: 10,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.caps.objects_per_viewpoint == 0 || self.caps.images_per_part == 0 {
            return Err(Error::invalid("caps must be positive"));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth <= 1.0) {
            return Err(Error::invalid(format!("bandwidth {} outside (0, 1]", self.bandwidth)));
        }
        self.fit.proposals.validate()?;
        self.fit.segmentation.validate()?;
        self.train.validate()?;
        self.mining.validate()?;
        if !(0.0..=1.0).contains(&self.harvest.nms_iou) || !(0.0..=1.0).contains(&self.harvest.min_confidence) {
            return Err(Error::invalid("harvest thresholds must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn proposals(&self) -> &ProposalConfig {
        &self.fit.proposals
    }
}

/// One fitted instance cropped out of a source image.
#[derive(Debug, Clone, PartialEq)]
pub struct CuratedInstance {
    pub id: String,
    pub source: String,
    pub bbox: BBox,
    pub raster: Raster,
}

impl CuratedInstance {
    /// Map a box in crop coordinates back into the source image.
    pub fn to_source(&self, b: &BBox) -> BBox {
        b.translate(self.bbox.x_min.round().max(0.0), self.bbox.y_min.round().max(0.0))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CuratedIndexEntry {
    pub id: String,
    pub source: String,
    pub set: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CuratedDataset {
    pub class_name: String,
    pub part_names: Vec<String>,
    /// Curated part crops P_i.
    pub parts: Vec<Vec<CuratedInstance>>,
    /// Curated object crops O_j, indexed by viewpoint.
    pub objects: [Vec<CuratedInstance>; Viewpoint::COUNT],
}

impl CuratedDataset {
    pub fn instance(&self, id: &str) -> Option<&CuratedInstance> {
        self.parts
            .iter()
            .chain(self.objects.iter())
            .flatten()
            .find(|c| c.id == id)
    }

    /// Average object crop size per viewpoint.
    pub fn frames(&self) -> [Size; Viewpoint::COUNT] {
        let mut out = [Size::new(1.0, 1.0); Viewpoint::COUNT];
        for (v, set) in self.objects.iter().enumerate() {
            if !set.is_empty() {
                let n = set.len() as f64;
                out[v] = Size::new(
                    set.iter().map(|c| c.raster.width() as f64).sum::<f64>() / n,
                    set.iter().map(|c| c.raster.height() as f64).sum::<f64>() / n,
                );
            }
        }
        out
    }

    pub fn index(&self) -> Vec<CuratedIndexEntry> {
        let parts = self
            .parts
            .iter()
            .zip(&self.part_names)
            .flat_map(|(set, name)| set.iter().map(move |c| (format!("part:{name}"), c)));
        let objects = self
            .objects
            .iter()
            .zip(Viewpoint::ALL)
            .flat_map(|(set, v)| set.iter().map(move |c| (format!("object:{v}"), c)));
        parts
            .chain(objects)
            .map(|(set, c)| CuratedIndexEntry {
                id: c.id.clone(),
                source: c.source.clone(),
                set,
                bbox: c.bbox,
            })
            .collect()
    }
}

fn curate(ids: &[String], store: &dyn ImageStore, cfg: &StageConfig) -> Result<Vec<CuratedInstance>> {
    let per_image: Vec<Vec<CuratedInstance>> = ids
        .par_iter()
        .map(|id| {
            let r = store.load(id)?;
            let boxes = if cfg.bypass_fitting {
                vec![r.full_box()]
            } else {
                fit_instance_boxes(&r, &cfg.fit)?
            };
            if boxes.is_empty() {
                warn!("no instance found in {id}");
            }
            boxes
                .into_iter()
                .enumerate()
                .map(|(k, b)| {
                    Ok(CuratedInstance {
                        id: format!("{id}#{k}"),
                        source: id.clone(),
                        bbox: b,
                        raster: r.crop(&b)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// T0: cap every set, fit instance boxes, split side views and crop.
pub fn stage_t0(manifest: &DatasetManifest, store: &dyn ImageStore, cfg: &StageConfig) -> Result<CuratedDataset> {
    manifest.validate()?;
    cfg.validate()?;
    manifest.check_files(store)?;
    let mut parts = Vec::with_capacity(manifest.parts.len());
    for (p, name) in manifest.parts.iter().enumerate() {
        let ids: Vec<String> = manifest.part_set(p).iter().take(cfg.caps.images_per_part).cloned().collect();
        let set = curate(&ids, store, cfg)?;
        if set.is_empty() {
            return Err(Error::invalid(format!("part set {name:?} is empty after curation")));
        }
        parts.push(set);
    }
    let mut objects: [Vec<CuratedInstance>; Viewpoint::COUNT] = Default::default();
    for (key, list) in &manifest.object_sets {
        let ids: Vec<String> = list.iter().take(cfg.caps.objects_per_viewpoint).cloned().collect();
        let set = curate(&ids, store, cfg)?;
        match ObjectSetKey::parse(key)? {
            ObjectSetKey::View(v) => objects[v.index()].extend(set),
            ObjectSetKey::Side => {
                if set.len() < 2 {
                    return Err(Error::invalid(format!("object set {key:?} needs at least two instances to split")));
                }
                let rasters: Vec<Raster> = set.iter().map(|c| c.raster.clone()).collect();
                let split = split_side_views(&rasters, cfg.seed)?;
                for i in split.left {
                    objects[Viewpoint::Left.index()].push(set[i].clone());
                }
                for i in split.right {
                    objects[Viewpoint::Right.index()].push(set[i].clone());
                }
            }
        }
    }
    for v in Viewpoint::ALL {
        if objects[v.index()].is_empty() {
            return Err(Error::invalid(format!("object set for viewpoint {v} is empty after curation")));
        }
    }
    info!(
        "curated {} part crops and {} object crops",
        parts.iter().map(Vec::len).sum::<usize>(),
        objects.iter().map(Vec::len).sum::<usize>()
    );
    Ok(CuratedDataset {
        class_name: manifest.class_name.clone(),
        part_names: manifest.parts.clone(),
        parts,
        objects,
    })
}

fn whole_features(c: &CuratedInstance) -> Result<FeatureVector> {
    extract_features(&c.raster, &c.raster.full_box())
}

fn part_samples(curated: &CuratedDataset) -> Result<Vec<Sample>> {
    let labeled: Vec<(usize, &CuratedInstance)> = curated
        .parts
        .iter()
        .enumerate()
        .flat_map(|(p, set)| set.iter().map(move |c| (p, c)))
        .collect();
    labeled
        .par_iter()
        .map(|(p, c)| Ok(Sample::new(whole_features(c)?, *p)))
        .collect()
}

/// T1: a P-way appearance model trained on part crops only.
pub fn stage_t1(curated: &CuratedDataset, cfg: &StageConfig) -> Result<ModelBundle> {
    cfg.validate()?;
    let samples = part_samples(curated)?;
    let spec = ClassifierSpec::parts(ClassifierRole::A1, curated.part_names.len(), false);
    let appearance = train_classifier(&samples, spec, &cfg.train)?;
    Ok(ModelBundle {
        stage: Stage::T1,
        class_name: curated.class_name.clone(),
        part_names: curated.part_names.clone(),
        appearance,
        locations: None,
        viewpoint: None,
        frames: curated.frames(),
        root: None,
        mined: Vec::new(),
        config: cfg.clone(),
    })
}

fn score_instances(clf: &PartClassifier, set: &[CuratedInstance], cfg: &StageConfig) -> Result<Vec<ScoredProposals>> {
    set.par_iter()
        .map(|c| {
            let props = generate_proposals_for(&c.raster, cfg.proposals(), &c.id)?;
            let props = part_proposals(props, &c.raster.full_box(), cfg.mining.max_part_area);
            ScoredProposals::compute(clf, &c.raster, &props)
        })
        .collect()
}

/// Keep the proposals small enough to be parts of `object`.
fn part_proposals(mut props: ProposalSet, object: &BBox, max_area: f64) -> ProposalSet {
    let keep = part_sized(&props.boxes, object, max_area);
    props.boxes = keep.into_iter().map(|i| props.boxes[i]).collect();
    props
}

fn records_from(mined: &MinedSet, background: usize, stage: Stage) -> Vec<MinedRecord> {
    let pos = mined.positives.iter().map(|p| MinedRecord {
        source: p.image_id.clone(),
        bbox: p.bbox,
        label: p.part_id,
        stage,
    });
    let neg = mined.negatives.iter().map(|n| MinedRecord {
        source: n.image_id.clone(),
        bbox: n.bbox,
        label: background,
        stage,
    });
    pos.chain(neg).collect()
}

/// Location models and mined samples computed at T2, exposed for inspection.
#[derive(Debug, Clone)]
pub struct T2Products {
    pub bundle: ModelBundle,
    pub mined: MinedSet,
    /// Harvested location samples per (part, viewpoint), before mining.
    pub harvested: Vec<Vec<(BBox, Size)>>,
}

/// T2: location models from A1 detections in object crops, mining with A1
/// and L2, then the (P+1)-way A2 and the viewpoint classifier V2.
pub fn stage_t2(t1: &ModelBundle, curated: &CuratedDataset, cfg: &StageConfig) -> Result<ModelBundle> {
    stage_t2_detailed(t1, curated, cfg).map(|p| p.bundle)
}

pub fn stage_t2_detailed(t1: &ModelBundle, curated: &CuratedDataset, cfg: &StageConfig) -> Result<T2Products> {
    cfg.validate()?;
    let parts = curated.part_names.len();
    let frames = curated.frames();
    let scored: Vec<Vec<ScoredProposals>> = curated
        .objects
        .iter()
        .map(|set| score_instances(&t1.appearance, set, cfg))
        .collect::<Result<_>>()?;

    let mut locations = LocationTable::new(parts, cfg.bandwidth, frames);
    let mut harvested = Vec::new();
    for p in 0..parts {
        for v in Viewpoint::ALL {
            let dets = harvest_from_scores(&scored[v.index()], p, &cfg.harvest);
            if dets.is_empty() {
                warn!("no location samples for part {} in {v} views", curated.part_names[p]);
            } else {
                locations.set(p, v, build_location_model(&dets, cfg.bandwidth, frames[v.index()])?)?;
            }
            harvested.push(dets);
        }
    }

    let views: Vec<MiningImage> = Viewpoint::ALL
        .iter()
        .flat_map(|&v| {
            curated.objects[v.index()]
                .iter()
                .zip(&scored[v.index()])
                .map(move |(c, s)| MiningImage {
                    image_id: c.id.clone(),
                    scored: s,
                    object_box: c.raster.full_box(),
                    viewpoint: Some(v),
                })
        })
        .collect();
    let mined = mine_from_scores(&views, parts, Some(&locations), &cfg.mining)?;
    info!("T2 mined {} positives and {} negatives", mined.positives.len(), mined.negatives.len());
    let records = records_from(&mined, parts, Stage::T2);

    let mut samples = part_samples(curated)?;
    samples.extend(record_samples(&records, curated, None)?);
    let spec = ClassifierSpec::parts(ClassifierRole::A2, parts, true);
    let appearance = train_classifier(&samples, spec, &cfg.train)?;
    let viewpoint = train_viewpoint_from_features(
        &curated
            .objects
            .iter()
            .map(|set| set.par_iter().map(whole_features).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?,
        &cfg.train,
    )?;
    Ok(T2Products {
        bundle: ModelBundle {
            stage: Stage::T2,
            class_name: t1.class_name.clone(),
            part_names: t1.part_names.clone(),
            appearance,
            locations: Some(locations),
            viewpoint: Some(viewpoint),
            frames,
            root: None,
            mined: records,
            config: cfg.clone(),
        },
        mined,
        harvested,
    })
}

/// Features of mined records; sources resolve to curated instances or to
/// hard-domain images in `hard`.
fn record_samples(records: &[MinedRecord], curated: &CuratedDataset, hard: Option<&[(String, Raster)]>) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .map(|r| {
            let raster = match curated.instance(&r.source) {
                Some(c) => &c.raster,
                None => hard
                    .and_then(|h| h.iter().find(|(id, _)| *id == r.source).map(|(_, img)| img))
                    .ok_or_else(|| Error::state(format!("mined sample source {} is unknown", r.source)))?,
            };
            Ok(Sample::new(extract_features(raster, &r.bbox)?, r.label))
        })
        .collect()
}

/// Proposals computed on the crop of `object_box`, in image coordinates.
pub fn object_box_proposals(r: &Raster, object_box: &BBox, cfg: &ProposalConfig, id: &str) -> Result<ProposalSet> {
    let (x0, y0, _, _) = r.pixel_span(object_box)?;
    let crop = r.crop(object_box)?;
    let mut p = generate_proposals_for(&crop, cfg, id)?;
    for b in &mut p.boxes {
        *b = b.translate(x0 as f64, y0 as f64);
    }
    Ok(p)
}

struct HardImage {
    id: String,
    raster: Raster,
    object_box: BBox,
    predicted: Viewpoint,
    scored: ScoredProposals,
}

/// T3: predict viewpoints of hard-domain objects with V2, mine inside their
/// boxes with A2 and L2, enrich the location models and retrain A3. The
/// root filter is trained here as well.
pub fn stage_t3(
    t2: &ModelBundle,
    curated: &CuratedDataset,
    hard_domain: &[HardDomainEntry],
    store: &dyn ImageStore,
    cfg: &StageConfig,
) -> Result<ModelBundle> {
    stage_t3_detailed(t2, curated, hard_domain, store, cfg).map(|(b, _)| b)
}

pub fn stage_t3_detailed(
    t2: &ModelBundle,
    curated: &CuratedDataset,
    hard_domain: &[HardDomainEntry],
    store: &dyn ImageStore,
    cfg: &StageConfig,
) -> Result<(ModelBundle, MinedSet)> {
    cfg.validate()?;
    if t2.stage < Stage::T2 {
        return Err(Error::state("T3 needs a T2 bundle"));
    }
    if hard_domain.is_empty() {
        warn!("hard domain is empty; relabeling the T2 bundle as T3");
        let mut b = t2.clone();
        b.stage = Stage::T3;
        return Ok((b, MinedSet::default()));
    }
    let v2 = t2.viewpoint.as_ref().ok_or_else(|| Error::state("T2 bundle lacks a viewpoint classifier"))?;
    let l2 = t2.locations.as_ref().ok_or_else(|| Error::state("T2 bundle lacks location models"))?;
    let parts = t2.part_count();

    let images: Vec<HardImage> = hard_domain
        .par_iter()
        .map(|e| {
            let raster = store.load(&e.image)?;
            let (predicted, _) = predict_viewpoint(v2, &raster, &e.object_box)?;
            let props = object_box_proposals(&raster, &e.object_box, cfg.proposals(), &e.image)?;
            let props = part_proposals(props, &e.object_box, cfg.mining.max_part_area);
            let scored = ScoredProposals::compute(&t2.appearance, &raster, &props)?;
            Ok(HardImage {
                id: e.image.clone(),
                raster,
                object_box: e.object_box,
                predicted,
                scored,
            })
        })
        .collect::<Result<_>>()?;

    let views: Vec<MiningImage> = images
        .iter()
        .map(|h| MiningImage {
            image_id: h.id.clone(),
            scored: &h.scored,
            object_box: h.object_box,
            viewpoint: Some(h.predicted),
        })
        .collect();
    let mined = mine_from_scores(&views, parts, Some(l2), &cfg.mining)?;
    info!("T3 mined {} positives and {} negatives", mined.positives.len(), mined.negatives.len());

    let mut l3 = l2.clone();
    for p in 0..parts {
        for v in Viewpoint::ALL {
            let extra: Vec<(BBox, Size)> = mined
                .positives
                .iter()
                .filter(|m| m.part_id == p)
                .filter_map(|m| {
                    let h = images.iter().find(|h| h.id == m.image_id)?;
                    (h.predicted == v).then(|| {
                        let o = h.object_box;
                        (m.bbox.translate(-o.x_min, -o.y_min), Size::new(o.width(), o.height()))
                    })
                })
                .collect();
            if extra.is_empty() {
                continue;
            }
            let current = l3.get(p, v).expect("part in range");
            let next: LocationModel = if current.is_empty() {
                build_location_model(&extra, cfg.bandwidth, t2.frames[v.index()])?
            } else {
                current.enriched(&extra)?
            };
            l3.set(p, v, next)?;
        }
    }

    let mut records = t2.mined.clone();
    records.extend(records_from(&mined, parts, Stage::T3));
    let hard_rasters: Vec<(String, Raster)> = images.iter().map(|h| (h.id.clone(), h.raster.clone())).collect();
    let mut samples = part_samples(curated)?;
    samples.extend(record_samples(&records, curated, Some(&hard_rasters))?);
    let spec = ClassifierSpec::parts(ClassifierRole::A3, parts, true);
    let init = cfg.warm_start_t3.then_some(&t2.appearance);
    let (appearance, _) = train_classifier_from(&samples, spec, &cfg.train, init)?;

    let root = train_root_filter(
        &images.iter().map(|h| (h.id.as_str(), &h.raster, vec![h.object_box])).collect::<Vec<_>>(),
        curated,
        cfg,
    )?;

    Ok((
        ModelBundle {
            stage: Stage::T3,
            class_name: t2.class_name.clone(),
            part_names: t2.part_names.clone(),
            appearance,
            locations: Some(l3),
            viewpoint: t2.viewpoint.clone(),
            frames: t2.frames,
            root: Some(root),
            mined: records,
            config: cfg.clone(),
        },
        mined,
    ))
}

/// Root filter: a 2-way object/background classifier. Positives are the
/// given object boxes and the curated object crops; negatives are sampled
/// image-wide proposals overlapping no object box by more than IoU 0.3.
pub fn train_root_filter(images: &[(&str, &Raster, Vec<BBox>)], curated: &CuratedDataset, cfg: &StageConfig) -> Result<PartClassifier> {
    let per_image: Vec<Vec<Sample>> = images
        .par_iter()
        .enumerate()
        .map(|(k, (id, r, objects))| {
            let mut out = Vec::new();
            for o in objects {
                out.push(Sample::new(extract_features(r, o)?, 0));
            }
            let props = generate_proposals_for(r, cfg.proposals(), id)?;
            let negatives: Vec<&BBox> = props
                .boxes
                .iter()
                .filter(|b| objects.iter().all(|o| iou(o, b) <= 0.3))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (k as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D));
            let n = cfg.root_negatives_per_image.min(negatives.len());
            let mut picks = sample(&mut rng, negatives.len(), n).into_vec();
            picks.sort_unstable();
            for i in picks {
                out.push(Sample::new(extract_features(r, negatives[i])?, 1));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut samples: Vec<Sample> = per_image.into_iter().flatten().collect();
    let crops: Vec<&CuratedInstance> = curated.objects.iter().flatten().collect();
    samples.extend(
        crops
            .par_iter()
            .map(|c| Ok(Sample::new(whole_features(c)?, 0)))
            .collect::<Result<Vec<_>>>()?,
    );
    train_classifier(&samples, ClassifierSpec::root(), &cfg.train)
}

/// Every stage's bundle from one manifest.
#[derive(Debug, Clone)]
pub struct StageBundles {
    pub a0: ModelBundle,
    pub t1: ModelBundle,
    pub t2: ModelBundle,
    pub t3: ModelBundle,
    pub curated: CuratedDataset,
    /// Mined at T2, in curated-crop coordinates.
    pub t2_mined: MinedSet,
    /// Mined at T3, in hard-domain image coordinates.
    pub t3_mined: MinedSet,
}

pub fn train_all_stages(manifest: &DatasetManifest, store: &dyn ImageStore, cfg: &StageConfig) -> Result<StageBundles> {
    let bypass = StageConfig {
        bypass_fitting: true,
        ..cfg.clone()
    };
    let raw = stage_t0(manifest, store, &bypass)?;
    let a0 = stage_t1(&raw, &bypass)?;
    let curated = stage_t0(manifest, store, cfg)?;
    let t1 = stage_t1(&curated, cfg)?;
    let t2 = stage_t2_detailed(&t1, &curated, cfg)?;
    let (t3, t3_mined) = stage_t3_detailed(&t2.bundle, &curated, &manifest.hard_domain, store, cfg)?;
    Ok(StageBundles {
        a0,
        t1,
        t2: t2.bundle,
        t3,
        curated,
        t2_mined: t2.mined,
        t3_mined,
    })
}
