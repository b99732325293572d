use std::fs;
use std::process::{Command, Output};

fn msshare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msshare")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn count_params_single_arch_with_macs() {
    let o = msshare(&["count-params", "--arch", "resnet50", "--macs"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(
        text.lines().any(|l| l.split_whitespace().take(4).eq(["resnet50", "shared", "17849408", "17.85"])),
        "{text}"
    );
    assert_eq!(text.lines().filter(|l| l.starts_with("resnet50")).count(), 3);
    let macs: Vec<&str> = text.lines().filter(|l| l.starts_with("resnet50")).map(|l| l.split_whitespace().last().unwrap()).collect();
    assert!(macs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn count_params_with_classifier_adds_the_head() {
    let o = msshare(&["count-params", "--arch", "resnet18", "--with-classifier"]);
    assert!(stdout(&o).contains("11689512"), "{}", stdout(&o));
}

#[test]
fn unknown_arch_is_an_error() {
    let o = msshare(&["count-params", "--arch", "resnet19"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("depth"), "{}", stderr(&o));
}

#[test]
fn grad_check_passes_and_negative_control_fails() {
    let o = msshare(&["grad-check", "--layer", "smsc-n2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("PASS"));
    let bad = msshare(&["grad-check", "--layer", "conv", "--corrupt"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = msshare(&["train", "--data", tmp.path().to_str().unwrap(), "--set", "learning_rate=0.1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn toy_train_eval_finetune_viz() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("toy");
    let run = tmp.path().join("run");
    let d = data.to_str().unwrap();
    let r = run.to_str().unwrap();
    let o = msshare(&["make-toy", "--out", d, "--images", "30", "--size", "24"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("24 train and 6 val"));

    let conf = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.conf");
    let sets = ["width=4", "input_size=20", "resize=24", "crop=20", "epochs=2", "batch_size=8"];
    let mut args = vec!["train", "--config", conf, "--data", d, "--out", r];
    for s in &sets {
        args.extend(["--set", s]);
    }
    let o = msshare(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("final train Top-1 error"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,lr,train_loss,train_top1,val_top1,val_top5,wall_seconds"));
    assert!(metrics.lines().nth(1).unwrap().contains(",NA,"), "top-5 undefined for 3 classes");
    for f in ["best.ckpt", "last.ckpt"] {
        assert!(run.join(f).is_file());
    }

    let ck = run.join("last.ckpt");
    let o = msshare(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", d]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Top-5: n/a"), "{}", stdout(&o));

    let ft = tmp.path().join("ft");
    let mut args = vec!["finetune", "--checkpoint", ck.to_str().unwrap(), "--freeze", "--data", d, "--out", ft.to_str().unwrap()];
    args.extend(["--set", "epochs=1", "--set", "resize=24", "--set", "crop=20", "--set", "batch_size=8"]);
    let o = msshare(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ft.join("param_norms.csv").is_file());

    let viz = tmp.path().join("viz");
    let o = msshare(&["viz-kernels", "--checkpoint", ck.to_str().unwrap(), "--out", viz.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("fewer than 256"));
    let ranking = fs::read_to_string(viz.join("ranking.csv")).unwrap();
    // width 4: the last shared layer keeps 32 / 2 unique kernels
    assert_eq!(ranking.lines().count(), 1 + 16);
    assert!(fs::read(viz.join("kernels.pgm")).unwrap().starts_with(b"P5\n15 15\n255\n"));
}
