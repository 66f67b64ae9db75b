use std::io::{Cursor, Read, Seek, SeekFrom};

use pgma::checkpoint::{Checkpoint, CheckpointError};
use pgma::config::RunConfig;
use pgma::dataset::Source;
use pgma::pgme::{
    episode_from_records, episode_records, load_episode, load_episode_with, read_records, read_records_filtered, save_episode, write_records,
    PgmeError, Record, Supports,
};
use pgma::runner;
use pgma_core::episode::Episode;
use pgma_core::synth::{StageSpec, SynthConfig, SynthWorld};

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        image_size: 16,
        stages: vec![StageSpec { grid: 8, layers: 2 }, StageSpec { grid: 4, layers: 1 }],
        feat_dim: 6,
        text_dim: 5,
        clip_grid: 4,
        ..SynthConfig::default()
    }
}

fn episode(shots: usize) -> Episode {
    SynthWorld::new(&tiny_synth()).unwrap().episode(7, 11, shots).unwrap()
}

fn encode(ep: &Episode) -> Vec<u8> {
    let mut buf = Vec::new();
    write_records(&mut buf, &episode_records(ep)).unwrap();
    buf
}

#[test]
fn episode_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    for shots in [0, 1, 3] {
        let ep = episode(shots);
        let path = dir.path().join(format!("ep{shots}.pgme"));
        save_episode(&path, &ep).unwrap();
        assert_eq!(load_episode(&path).unwrap(), ep);
    }
}

#[test]
fn zero_shot_file_has_no_support_records() {
    let ep = episode(0);
    let records = read_records(Cursor::new(encode(&ep))).unwrap();
    assert!(records.iter().all(|r| !r.name.starts_with("support")));
    let back = episode_from_records(&records).unwrap();
    assert!(back.supports.is_empty());
    assert_eq!(back.query_mask, ep.query_mask);
}

#[test]
fn record_layout_is_little_endian() {
    let mut buf = Vec::new();
    write_records(&mut buf, &[Record::f32("x", &[2], vec![1.0, -2.5]), Record::u8("m", &[1, 3], vec![0, 1, 1])]).unwrap();
    let mut expect = b"PGME".to_vec();
    expect.extend(1u32.to_le_bytes());
    expect.extend(1u16.to_le_bytes());
    expect.extend(b"x");
    expect.extend([0, 1]);
    expect.extend(2u32.to_le_bytes());
    expect.extend(1.0f32.to_le_bytes());
    expect.extend((-2.5f32).to_le_bytes());
    expect.extend(1u16.to_le_bytes());
    expect.extend(b"m");
    expect.extend([1, 2]);
    expect.extend(1u32.to_le_bytes());
    expect.extend(3u32.to_le_bytes());
    expect.extend([0, 1, 1]);
    assert_eq!(buf, expect);
}

#[test]
fn names_follow_the_stage_layer_convention() {
    let names: Vec<String> = episode_records(&episode(1)).into_iter().map(|r| r.name).collect();
    for n in ["query.feat.S1.L1", "query.feat.S1.L2", "query.feat.S2.L1", "query.clip", "query.mask", "text.embed", "support0.feat.S2.L1", "support0.clip", "support0.mask", "meta.class_id", "meta.image_size"] {
        assert!(names.iter().any(|x| x == n), "missing {n}");
    }
}

#[test]
fn wrong_magic_is_rejected() {
    let mut buf = encode(&episode(1));
    buf[..4].copy_from_slice(b"PGMX");
    assert!(matches!(read_records(Cursor::new(buf)), Err(PgmeError::MagicMismatch(m)) if &m == b"PGMX"));
}

#[test]
fn unknown_version_is_rejected() {
    let mut buf = encode(&episode(1));
    buf[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(read_records(Cursor::new(buf)), Err(PgmeError::UnsupportedVersion(2))));
}

#[test]
fn every_truncation_point_is_reported() {
    let buf = encode(&episode(1));
    for cut in (0..buf.len()).step_by(37).chain([buf.len() - 1]) {
        let err = read_records(Cursor::new(&buf[..cut])).unwrap_err();
        assert!(matches!(err, PgmeError::Truncated(_)), "cut at {cut}: {err}");
    }
}

#[test]
fn truncated_payload_names_its_record() {
    let mut buf = Vec::new();
    write_records(&mut buf, &[Record::f32("text.embed", &[4], vec![0.5; 4])]).unwrap();
    buf.truncate(buf.len() - 3);
    match read_records(Cursor::new(buf)) {
        Err(PgmeError::Truncated(Some(n))) => assert_eq!(n, "text.embed"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unknown_dtype_is_rejected() {
    let mut buf = Vec::new();
    write_records(&mut buf, &[Record::u8("query.mask", &[1, 1], vec![1])]).unwrap();
    let dtype_at = 8 + 2 + "query.mask".len();
    buf[dtype_at] = 7;
    match read_records(Cursor::new(buf)) {
        Err(PgmeError::UnknownDtype { name, dtype }) => assert_eq!((name.as_str(), dtype), ("query.mask", 7)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_contents_are_structured_errors() {
    let records = episode_records(&episode(1));
    let without = |name: &str| records.iter().filter(|r| r.name != name).cloned().collect::<Vec<_>>();
    assert!(matches!(episode_from_records(&without("text.embed")), Err(PgmeError::MissingRecord(n)) if n == "text.embed"));
    assert!(matches!(episode_from_records(&without("support0.mask")), Err(PgmeError::MissingRecord(_))));

    let mut extra = records.clone();
    extra.push(Record::f32("query.bogus", &[1], vec![0.0]));
    assert!(matches!(episode_from_records(&extra), Err(PgmeError::InvalidRecord { name, .. }) if name == "query.bogus"));

    let mut dup = records.clone();
    dup.push(records[0].clone());
    assert!(matches!(episode_from_records(&dup), Err(PgmeError::InvalidRecord { .. })));

    let mut bad_mask = records.clone();
    let m = bad_mask.iter_mut().find(|r| r.name == "query.mask").unwrap();
    *m = Record::u8("query.mask", &m.dims.clone(), vec![2; m.dims.iter().product()]);
    assert!(matches!(episode_from_records(&bad_mask), Err(PgmeError::InvalidRecord { .. })));
}

/// Counts bytes actually read through it.
struct Counting<R> {
    inner: R,
    read: usize,
}

impl<R: Read> Read for Counting<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.read += n;
        Ok(n)
    }
}

impl<R: Seek> Seek for Counting<R> {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        self.inner.seek(pos)
    }
}

#[test]
fn skipped_supports_are_not_read() {
    let ep = episode(5);
    let buf = encode(&ep);
    let mut all = Counting { inner: Cursor::new(buf.clone()), read: 0 };
    read_records_filtered(&mut all, |_| true).unwrap();
    assert_eq!(all.read, buf.len());

    let support_bytes: usize = episode_records(&ep)
        .iter()
        .filter(|r| r.name.starts_with("support"))
        .map(|r| r.dims.iter().product::<usize>() * if r.name.ends_with(".mask") { 1 } else { 4 })
        .sum();
    let mut lazy = Counting { inner: Cursor::new(buf.clone()), read: 0 };
    let kept = read_records_filtered(&mut lazy, |n| !n.starts_with("support")).unwrap();
    assert!(kept.iter().all(|r| !r.name.starts_with("support")));
    assert_eq!(lazy.read, buf.len() - support_bytes);
}

#[test]
fn loading_a_prefix_of_the_shots() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ep.pgme");
    let ep = episode(7);
    save_episode(&path, &ep).unwrap();
    let five = load_episode_with(&path, Supports::First(5)).unwrap();
    assert_eq!(five.supports, ep.supports[..5]);
    assert!(load_episode_with(&path, Supports::First(0)).unwrap().supports.is_empty());
    assert!(matches!(load_episode_with(&path, Supports::First(8)), Err(PgmeError::MissingRecord(_))));
}

fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig { synth: tiny_synth(), ..RunConfig::default() };
    cfg.model.model_dim = 8;
    cfg.model.heads = 2;
    cfg.model.decoder.width = 4;
    cfg.model.decoder.low_width = 2;
    cfg.train.batch = 2;
    cfg
}

fn trained_checkpoint() -> Checkpoint {
    let cfg = tiny_run();
    let source = Source::from(SynthWorld::new(&cfg.synth).unwrap());
    let mut t = runner::new_trainer(&cfg, &source).unwrap();
    runner::step(&mut t, &source).unwrap();
    runner::step(&mut t, &source).unwrap();
    runner::checkpoint_of(&cfg, &t)
}

#[test]
fn checkpoint_round_trip() {
    let ck = trained_checkpoint();
    assert_eq!(ck.step, 2);
    assert!(ck.opt.is_some());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.pgmc");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.meta.config_hash, tiny_run().hash());

    let ep = episode(1);
    let mode = pgma_core::episode::TaskMode::Fss;
    assert_eq!(back.model().unwrap().predict(&ep, mode).unwrap(), ck.model().unwrap().predict(&ep, mode).unwrap());
}

#[test]
fn checkpoint_without_optimizer_state() {
    let mut ck = trained_checkpoint();
    ck.opt = None;
    let mut buf = Vec::new();
    ck.write(&mut buf).unwrap();
    assert_eq!(Checkpoint::read(&mut Cursor::new(buf)).unwrap(), ck);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ck = trained_checkpoint();
    let mut buf = Vec::new();
    ck.write(&mut buf).unwrap();

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::read(&mut Cursor::new(bad)), Err(CheckpointError::MagicMismatch(_))));

    let mut bad = buf.clone();
    bad[4..8].copy_from_slice(&9u32.to_le_bytes());
    assert!(matches!(Checkpoint::read(&mut Cursor::new(bad)), Err(CheckpointError::UnsupportedVersion(9))));

    for cut in [6, 40, buf.len() / 2, buf.len() - 1] {
        assert!(matches!(Checkpoint::read(&mut Cursor::new(&buf[..cut])), Err(CheckpointError::Truncated)), "cut at {cut}");
    }
}
