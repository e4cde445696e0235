use shootseg::config::{RunConfig, KEYS};
use shootseg::segment::Task;
use shootseg::Error;

#[test]
fn defaults_cover_every_key() {
    let cfg = RunConfig::default();
    for (k, v, _) in KEYS {
        assert_eq!(cfg.get(k), *v);
    }
    assert_eq!(cfg.to_text().lines().count(), KEYS.len());
}

#[test]
fn parse_comments_and_overrides() {
    let cfg = RunConfig::parse("# run\n\nseed = 7\nweak.k=50\n").unwrap();
    assert_eq!(cfg.u64("seed").unwrap(), 7);
    assert_eq!(cfg.usize("weak.k").unwrap(), 50);
    assert_eq!(cfg.get("voxel_size"), "1.5");
}

#[test]
fn unknown_and_malformed_lines_are_rejected() {
    let e = RunConfig::parse("seed=1\nbogus=3\n").unwrap_err();
    assert!(matches!(&e, Error::Config(m) if m.contains("line 2") && m.contains("bogus")), "{e}");
    assert!(matches!(RunConfig::parse("no equals sign"), Err(Error::Config(_))));
    let mut cfg = RunConfig::default();
    assert!(cfg.apply("seed").is_err());
    assert!(cfg.apply("nope=1").is_err());
    cfg.apply("seed=9").unwrap();
    assert_eq!(cfg.get("seed"), "9");
}

#[test]
fn text_round_trip_is_sorted_and_exact() {
    let mut cfg = RunConfig::default();
    cfg.apply("pretrain.lambda=0.03").unwrap();
    cfg.apply("data.input=/tmp/a b.xyzl").unwrap();
    let text = cfg.to_text();
    let keys: Vec<&str> = text.lines().map(|l| l.split_once('=').unwrap().0).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    let back = RunConfig::parse(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_text(), text);
}

#[test]
fn file_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "finetune.iterations=12\n").unwrap();
    assert_eq!(RunConfig::load(&path).unwrap().usize("finetune.iterations").unwrap(), 12);
    assert!(matches!(RunConfig::load(&dir.path().join("missing.cfg")), Err(Error::Io { .. })));
}

#[test]
fn typed_getters() {
    let mut cfg = RunConfig::default();
    cfg.set("seed", "-1").unwrap();
    assert!(cfg.u64("seed").is_err());
    cfg.set("voxel_size", "inf").unwrap();
    assert!(cfg.f64("voxel_size").is_err());
    cfg.set("voxel_size", "0").unwrap();
    assert!(cfg.voxel_size().is_err());
    cfg.set("weak.strip_soil", "yes").unwrap();
    assert!(cfg.bool("weak.strip_soil").is_err());
    assert!(cfg.path("data.input").is_none());
    assert!(cfg.require_path("data.input").is_err());
    cfg.set("data.input", "a.xyzl").unwrap();
    assert_eq!(cfg.require_path("data.input").unwrap(), std::path::Path::new("a.xyzl"));
}

#[test]
#[should_panic(expected = "not a registered config key")]
fn get_of_unregistered_key_panics() {
    RunConfig::default().get("nope");
}

#[test]
fn derived_defaults_follow_voxel_size() {
    let mut cfg = RunConfig::default();
    cfg.set("voxel_size", "2").unwrap();
    assert_eq!(cfg.backbone().unwrap().aggregation_radius, 8.0);
    assert!((cfg.augment().unwrap().jitter_sigma - 0.4).abs() < 1e-12);
    cfg.set("backbone.aggregation_radius", "5").unwrap();
    cfg.set("augment.jitter_sigma", "0.1").unwrap();
    assert_eq!(cfg.backbone().unwrap().aggregation_radius, 5.0);
    assert_eq!(cfg.augment().unwrap().jitter_sigma, 0.1);
}

#[test]
fn builders_read_their_keys() {
    let mut cfg = RunConfig::default();
    for kv in [
        "pretrain.lambda=0.03",
        "pretrain.clip_norm=0",
        "finetune.iterations=7",
        "finetune.offset_scale=4",
        "cluster.min_size=10",
        "synth.holes=2",
        "synth.soil=true",
        "seed=5",
    ] {
        cfg.apply(kv).unwrap();
    }
    let p = cfg.pretrain().unwrap();
    assert_eq!(p.lambda, 0.03);
    assert_eq!(p.schedule.clip_norm, None);
    assert_eq!(p.seed, 5);
    assert_eq!(p.settings.get("seed").map(String::as_str), Some("5"));
    let f = cfg.finetune(Task::Instance).unwrap();
    assert_eq!(f.schedule.iterations, 7);
    assert_eq!(f.offset_scale, 4.0);
    assert_eq!(f.schedule.clip_norm, Some(5.0));
    assert_eq!(cfg.cluster().unwrap().min_size, 10);
    let s = cfg.synth().unwrap();
    assert_eq!(s.holes.unwrap().count, 2);
    assert!(s.soil.is_some());
    assert_eq!(s.density, 3.0);
}

#[test]
fn invalid_builder_inputs() {
    let mut cfg = RunConfig::default();
    cfg.apply("synth.leaves_min=7").unwrap();
    assert!(cfg.synth().is_err());

    let mut cfg = RunConfig::default();
    cfg.apply("cluster.radius=-1").unwrap();
    assert!(cfg.cluster().is_err());

    let mut cfg = RunConfig::default();
    cfg.apply("augment.scale_min=2").unwrap();
    assert!(matches!(cfg.augment(), Err(Error::Config(_))));

    let mut cfg = RunConfig::default();
    cfg.apply("backbone.blocks=x").unwrap();
    assert!(cfg.backbone().is_err());
}
