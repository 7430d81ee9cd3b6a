use partlearn::bundle::{ModelBundle, Stage};
use partlearn::classifier::TrainConfig;
use partlearn::detect::detect_parts;
use partlearn::manifest::DatasetManifest;
use partlearn::pipeline::{stage_t0, stage_t1, stage_t2, stage_t3, StageConfig};
use partlearn::store::{FsStore, ImageStore};
use partlearn::synth::{generate_benchmark, BenchmarkCounts, BenchmarkSpec};

fn tiny() -> partlearn::synth::Benchmark {
    let spec = BenchmarkSpec {
        archetype: 4,
        counts: BenchmarkCounts {
            images_per_part: 4,
            objects_per_viewpoint: 3,
            hard_domain: 4,
            evaluation: 2,
            pair_fraction: 0.25,
        },
        ..BenchmarkSpec::default()
    };
    generate_benchmark(&spec, 5).unwrap()
}

#[test]
fn stages_from_disk_match_memory() {
    let bench = tiny();
    let dir = tempfile::tempdir().unwrap();
    bench.store.save_to_dir(dir.path()).unwrap();
    bench.manifest.save(&dir.path().join("manifest.json")).unwrap();
    let manifest = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest, bench.manifest);
    let fs = FsStore::new(dir.path());
    manifest.check_files(&fs).unwrap();

    let cfg = StageConfig {
        train: TrainConfig {
            max_iterations: 100,
            ..TrainConfig::default()
        },
        ..StageConfig::default()
    };
    let from_disk = stage_t0(&manifest, &fs, &cfg).unwrap();
    let from_memory = stage_t0(&bench.manifest, &bench.store, &cfg).unwrap();
    assert_eq!(from_disk, from_memory);

    let t1 = stage_t1(&from_disk, &cfg).unwrap();
    let t2 = stage_t2(&t1, &from_disk, &cfg).unwrap();
    let t3 = stage_t3(&t2, &from_disk, &manifest.hard_domain, &fs, &cfg).unwrap();
    assert_eq!((t1.stage, t2.stage, t3.stage), (Stage::T1, Stage::T2, Stage::T3));
    assert!(t3.root.is_some() && t3.viewpoint.is_some() && t3.locations.is_some());
    assert!(stage_t3(&t1, &from_disk, &manifest.hard_domain, &fs, &cfg).is_err());

    let path = dir.path().join("t3.pfb");
    t3.save(&path).unwrap();
    let loaded = ModelBundle::load(&path).unwrap();
    assert_eq!(loaded, t3);

    let img = &bench.evaluation.images[0];
    let r = fs.load(&img.image_id).unwrap();
    let dets = detect_parts(&loaded, &r, &img.objects[0].bbox).unwrap();
    assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(dets.iter().all(|d| d.part_id < loaded.part_count()));
    assert_eq!(dets, detect_parts(&t3, &r, &img.objects[0].bbox).unwrap());
}

#[test]
fn missing_image_is_reported() {
    let bench = tiny();
    let dir = tempfile::tempdir().unwrap();
    assert!(bench.manifest.check_files(&FsStore::new(dir.path())).is_err());
}
