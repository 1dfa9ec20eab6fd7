use cueguide::checkpoint::Checkpoint;
use cueguide::cli::run;
use cueguide::data::DatasetManifest;
use cueguide::data::Split;
use std::path::Path;

fn cmd(args: &[&str]) -> i32 {
    let mut argv = vec!["cueguide"];
    argv.extend_from_slice(args);
    run(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "seed = 3\n[data]\nsize = 32\n[model]\ncue_width = 2\ngen_width = 2\ndis_width = 2\nseg_width = 2\n[train]\nbatch = 2\nlog_every = 1\n[pretrain]\nbatch = 4\n";

#[test]
fn make_data_writes_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(cmd(&["make-data", "--out", p(&d), "--n-hq", "8", "--n-lq", "8", "--size", "64", "--seed", "1"]), 0);
    let m = DatasetManifest::load(&d, Split::Train).unwrap();
    assert_eq!(m.hq_ids.len() + m.lq_ids.len(), 16);
    assert!(m.hq_ids.iter().all(|id| !m.lq_ids.contains(id)));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(cmd(&["train", "--no-such-flag"]), 2);
    assert_eq!(cmd(&["no-such-command"]), 2);
    assert_eq!(cmd(&["make-data", "--out", "x", "--split", "validation"]), 2);
}

#[test]
fn runtime_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "precision = 32\n").unwrap();
    let out = dir.path().join("o.ckpt");
    assert_eq!(cmd(&["train", "--config", p(&cfg), "--out", p(&out)]), 1);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"CUEGCKPT\x01\x00\x00\x00").unwrap();
    assert_eq!(cmd(&["eval", "--ckpt", p(&junk), "--data", p(dir.path())]), 1);
}

#[test]
fn full_pipeline_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    for (split, seed, n_hq, n_lq) in [("train", "1", "4", "4"), ("test", "2", "2", "3")] {
        assert_eq!(
            cmd(&["make-data", "--out", p(&data), "--n-hq", n_hq, "--n-lq", n_lq, "--size", "32", "--seed", seed, "--split", split]),
            0
        );
    }
    let common = ["--config", p(&cfg), "--data", p(&data)];
    let pre = root.join("pre.ckpt");
    let mut args = vec!["pretrain-cue", "--out", p(&pre), "--epochs", "1"];
    args.extend(common);
    assert_eq!(cmd(&args), 0);

    let (a, b) = (root.join("a.ckpt"), root.join("b.ckpt"));
    let log = root.join("log.csv");
    for out in [&a, &b] {
        let mut args = vec!["train", "--init", p(&pre), "--out", p(out), "--steps", "3", "--downstream-steps", "2", "--log", p(&log)];
        args.extend(common);
        assert_eq!(cmd(&args), 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 1 + 3 + 2);
    let ck = Checkpoint::load(&a).unwrap();
    assert_eq!((ck.counter("pretrain"), ck.counter("train"), ck.counter("downstream")), (1, 3, 2));

    let coop = root.join("coop.ckpt");
    let mut args = vec!["train-coop", "--init", p(&a), "--out", p(&coop), "--steps", "2", "--freeze-downstream"];
    args.extend(common);
    assert_eq!(cmd(&args), 0);
    let after = Checkpoint::load(&coop).unwrap();
    let seg = |c: &Checkpoint| c.params.iter().filter(|p| p.name.starts_with("seg.")).cloned().collect::<Vec<_>>();
    assert_eq!(seg(&ck), seg(&after));
    assert_eq!(after.counter("coop"), 2);

    let csv = root.join("eval.csv");
    let summary = root.join("summary.json");
    let images = root.join("enhanced");
    assert_eq!(
        cmd(&["eval", "--ckpt", p(&coop), "--data", p(&data), "--out", p(&csv), "--summary", p(&summary), "--save-images", p(&images)]),
        0
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next().unwrap(), "id,snr_r3,snr_r5,snr_r7,snr_r9,ag,en,dice,acc,sen,auc,g_mean");
    assert_eq!(rows.count(), 3);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(json["count"], 3);
    assert_eq!(std::fs::read_dir(&images).unwrap().count(), 3);

    let out = root.join("enhanced2");
    let lq = data.join("test/lq");
    let guide = std::fs::read_dir(data.join("test/hq")).unwrap().next().unwrap().unwrap().path();
    assert_eq!(cmd(&["enhance", "--ckpt", p(&coop), "--input", p(&lq), "--out", p(&out)]), 1);
    assert_eq!(cmd(&["enhance", "--ckpt", p(&coop), "--input", p(&lq), "--guide", p(&guide), "--out", p(&out)]), 0);
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 3);

    let report = root.join("grad.txt");
    assert_eq!(cmd(&["gradcheck", "--ckpt", p(&coop), "--samples", "16", "--fd-probes", "2", "--out", p(&report)]), 0);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("status = pass"), "{}", text);
}
