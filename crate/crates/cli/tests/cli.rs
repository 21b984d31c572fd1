use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use robustgs::degrade::write_ppm;
use robustgs::harness::data::synthetic_images;

fn robustgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robustgs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_images(dir: &Path, n: usize) {
    fs::create_dir_all(dir).unwrap();
    for (i, img) in synthetic_images(n, 16, 3).unwrap().iter().enumerate() {
        write_ppm(dir.join(format!("img{i}.ppm")), img).unwrap();
    }
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let o = robustgs(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = robustgs(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn help_succeeds() {
    let o = robustgs(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("bench-scan"));
}

#[test]
fn degrade_writes_one_output_per_image_and_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("clean");
    write_images(&input, 3);
    let cfg = tmp.path().join("c.cfg");
    fs::write(
        &cfg,
        format!("# three images\ndata_dir = {}\nseed = 5\n", input.display()),
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = robustgs(&[
        "degrade",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        vec!["img0.ppm", "img1.ppm", "img2.ppm", "labels.tsv"]
    );
    let labels = fs::read_to_string(out.join("labels.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = labels.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], format!("img{i}.ppm"));
        assert!(r[1].parse::<usize>().unwrap() < 6);
        let s: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&s));
    }

    // Same seed, same bytes.
    let again = tmp.path().join("again");
    let o = robustgs(&[
        "degrade",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    for n in &names {
        assert_eq!(
            fs::read(out.join(n)).unwrap(),
            fs::read(again.join(n)).unwrap()
        );
    }
}

#[test]
fn degrade_of_an_empty_directory_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = robustgs(&[
        "degrade",
        "--input",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = robustgs(&["bench-scan", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1"));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = robustgs(&[
        "eval",
        "--checkpoint",
        tmp.path().join("absent.ckpt").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = robustgs(&["train-enhancer", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_scan_table_has_non_decreasing_lengths() {
    let o = robustgs(&[
        "bench-scan",
        "--lengths",
        "64,16,32",
        "--states",
        "4,16",
        "--tokens",
        "256",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
        .collect();
    assert_eq!(rows.len(), 6);
    let lengths: Vec<usize> = rows
        .iter()
        .map(|r| r.split('\t').next().unwrap().parse().unwrap())
        .collect();
    assert!(lengths.windows(2).all(|w| w[0] <= w[1]), "{lengths:?}");
    assert!(text.contains("length\tstate\tseq-ns/token\tpar-ns/token"));
}

#[test]
fn train_enhance_and_eval_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_owned();
    let cfg = p("tiny.cfg");
    fs::write(
        &cfg,
        "image_size = 24\ntrain_images = 12\nholdout_images = 12\nbatch_size = 6\nepochs = 2\n\
         learning_rate = 1e-3\nz_dim = 16\nchannels = 48\nstate_dim = 4\nclasses = 4\nd_inner = 8\n\
         crop_size = 16\ncrop_shift = 4\n",
    )
    .unwrap();

    let o = robustgs(&["train-gendeg", "--config", &cfg, "--out", &p("g")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("steps 4"));
    let gendeg = p("g/gendeg.ckpt");
    assert!(Path::new(&gendeg).exists(), "{}", stdout(&o));

    let o = robustgs(&[
        "train-enhancer",
        "--config",
        &cfg,
        "--out",
        &p("e"),
        "--gendeg",
        &gendeg,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let enhancer = p("e/enhancer.ckpt");
    assert!(Path::new(&enhancer).exists(), "{}", stdout(&o));

    let input = tmp.path().join("views");
    fs::create_dir_all(&input).unwrap();
    for (i, img) in synthetic_images(2, 24, 9).unwrap().iter().enumerate() {
        write_ppm(input.join(format!("v{i}.ppm")), img).unwrap();
    }
    let o = robustgs(&[
        "enhance",
        "--config",
        &cfg,
        "--checkpoint",
        &enhancer,
        "--gendeg",
        &gendeg,
        "--input",
        input.to_str().unwrap(),
        "--out",
        &p("x"),
        "--dump-features",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("enhanced 2 images"));
    let features = fs::read_to_string(tmp.path().join("x/features.txt")).unwrap();
    assert!(features.contains("# scene v0.ppm v1.ppm"));

    let o = robustgs(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        &enhancer,
        "--gendeg",
        &gendeg,
        "--out",
        &p("r"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("average"), "{}", stdout(&o));
}
