use std::fs;
use std::path::Path;

use sadse::data::{load_matrix, MatrixFormat, TextOptions};
use sadse::nn::{Autoencoder, LossVariant};
use sadse::pipeline::{
    embed_with_checkpoint, export_embedding_2d, ingest, run_ablation, run_pipeline, DataSource, EvalMode,
    PipelineConfig, SelfExprMode,
};
use tempfile::TempDir;

/// The desk preset shrunk to a few seconds: 3 blobs of 40 points.
fn small(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::preset("desk").unwrap();
    cfg.output_dir = dir.to_path_buf();
    if let Some(DataSource::Blobs(b)) = cfg.data.source.as_mut() {
        b.n_clusters = 3;
        b.points_per = 40;
    }
    cfg.data.batch_size = 40;
    cfg.spectral.k = Some(2);
    cfg.selfexpr.epochs = 3;
    cfg.training.pretrain_epochs = 5;
    cfg.training.train_epochs = 10;
    cfg.kmeans.restarts = 3;
    cfg
}

fn stage_names(m: &sadse::pipeline::RunManifest) -> Vec<&str> {
    m.stages.iter().map(|s| s.name.as_str()).collect()
}

#[test]
fn zero_epochs_embed_with_the_initial_encoder() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small(dir.path());
    cfg.selfexpr.epochs = 0;
    cfg.training.pretrain_epochs = 0;
    cfg.training.train_epochs = 0;
    let m = run_pipeline(&cfg).unwrap();
    assert_eq!(
        stage_names(&m),
        ["ingest", "split", "batch", "targets", "selfexpr", "pretrain", "train", "embed", "cluster"]
    );
    let ds = ingest(&cfg).unwrap();
    let fresh = Autoencoder::new(&[20, 32, 16, 2], cfg.seed).unwrap();
    assert_eq!(m.embedding, fresh.embed(&ds.features).unwrap());
    assert!(m.pretrain_history.is_empty() && m.train_history.is_empty());
    for a in &m.artifacts {
        assert!(a.exists(), "{} missing", a.display());
    }
}

#[test]
fn same_config_and_seed_give_identical_files() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    run_pipeline(&small(a.path())).unwrap();
    run_pipeline(&small(b.path())).unwrap();
    for f in [
        "predicted.txt",
        "loss_pretrain.txt",
        "loss_train.txt",
        "embedding.sadm",
        "model.ckpt",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    // metrics embed the output directory through the config snapshot
    let strip = |p: &Path| {
        fs::read_to_string(p.join("metrics.txt"))
            .unwrap()
            .replace(&p.display().to_string(), "OUT")
    };
    assert_eq!(strip(a.path()), strip(b.path()));
}

#[test]
fn rerun_resumes_from_cached_stages() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path());
    let first = run_pipeline(&cfg).unwrap();
    let metrics = fs::read(dir.path().join("metrics.txt")).unwrap();
    fs::remove_file(dir.path().join("model.ckpt")).unwrap();
    fs::remove_file(dir.path().join("metrics.txt")).unwrap();

    let second = run_pipeline(&cfg).unwrap();
    for s in ["targets", "selfexpr", "pretrain", "train"] {
        assert!(second.stage(s).unwrap().cached, "{s} recomputed");
        assert!(!first.stage(s).unwrap().cached);
    }
    assert_eq!(fs::read(dir.path().join("metrics.txt")).unwrap(), metrics);
    assert!(dir.path().join("model.ckpt").exists());

    let mut longer = cfg.clone();
    longer.training.train_epochs += 1;
    let third = run_pipeline(&longer).unwrap();
    assert!(third.stage("pretrain").unwrap().cached);
    assert!(!third.stage("train").unwrap().cached);
}

#[test]
fn test_mode_embeds_held_out_points_from_the_checkpoint() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small(dir.path());
    cfg.mode = EvalMode::Test;
    let run = run_pipeline(&cfg).unwrap();
    assert_eq!(run.embedding.ncols(), 24);

    let m = embed_with_checkpoint(&cfg, &dir.path().join("model.ckpt")).unwrap();
    assert_eq!(stage_names(&m), ["ingest", "split", "load_checkpoint", "embed"]);
    assert_eq!(m.embedding, run.embedding);
    assert_eq!(m.labels, run.labels);
}

#[test]
fn ablation_reuses_the_pretrained_model() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path());
    let t = run_ablation(&cfg, &LossVariant::ALL, &[SelfExprMode::Attention]).unwrap();
    assert_eq!(t.cells.len(), 3);
    assert!(!t.cells[0].pretrain_cached);
    assert!(t.cells[1..].iter().all(|c| c.pretrain_cached));
    assert!(t.cells.iter().all(|c| c.outcome.is_ok()));
    let text = fs::read_to_string(dir.path().join("ablation.txt")).unwrap();
    assert_eq!(text, t.to_text());
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn failures_name_their_stage() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small(dir.path());
    cfg.data.source = Some(DataSource::File {
        path: dir.path().join("absent.sadm"),
        format: MatrixFormat::RawBinary,
        text: TextOptions::default(),
    });
    let err = run_pipeline(&cfg).unwrap_err().to_string();
    assert!(err.starts_with("stage `ingest` failed"), "{err}");
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("status = failed at ingest"));

    let mut cfg = small(dir.path());
    cfg.spectral.k = Some(500);
    let err = run_pipeline(&cfg).unwrap_err().to_string();
    assert!(err.contains("stage `targets` failed"), "{err}");
}

#[test]
fn export_writes_one_parsable_row_per_point() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path());
    let m = run_pipeline(&cfg).unwrap();
    let path = dir.path().join("xy.csv");
    let xy = export_embedding_2d(&m.embedding, m.labels.as_deref(), &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), m.embedding.ncols());
    for (j, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert!((f[0].parse::<f64>().unwrap() - xy[(0, j)]).abs() < 1e-9);
        assert!((f[1].parse::<f64>().unwrap() - xy[(1, j)]).abs() < 1e-9);
        assert_eq!(f[2].parse::<usize>().unwrap(), m.labels.as_ref().unwrap()[j]);
    }
    let one_dim = m.embedding.rows(0, 1).into_owned();
    assert!(export_embedding_2d(&one_dim, None, &path).is_err());
}

#[test]
fn saved_embedding_round_trips() {
    let dir = TempDir::new().unwrap();
    let m = run_pipeline(&small(dir.path())).unwrap();
    let ds = load_matrix(
        dir.path().join("embedding.sadm"),
        MatrixFormat::RawBinary,
        TextOptions::default(),
    )
    .unwrap();
    assert_eq!(ds.features, m.embedding);
    assert_eq!(ds.labels, m.labels);
}
