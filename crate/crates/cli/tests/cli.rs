use std::path::Path;
use std::process::Command;

use image::{GrayImage, Luma, Rgb, RgbImage};
use tunet::harness::Checkpoint;

fn tunet() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tunet"));
    c.env("RUST_LOG", "warn").env_remove("TUNET_SEED");
    c
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "{:?} failed:\n{}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_scene(dir: &Path, name: &str, w: u32, h: u32) {
    for part in ["A", "B", "label"] {
        std::fs::create_dir_all(dir.join(part)).unwrap();
    }
    let a = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 200) as u8, (y % 200) as u8, 90]));
    let mut b = a.clone();
    let mut label = GrayImage::new(w, h);
    for y in 4..20 {
        for x in 6..22 {
            b.put_pixel(x, y, Rgb([250, 10, 200]));
            label.put_pixel(x, y, Luma([255]));
        }
    }
    a.save(dir.join("A").join(format!("{name}.png"))).unwrap();
    b.save(dir.join("B").join(format!("{name}.png"))).unwrap();
    label
        .save(dir.join("label").join(format!("{name}.png")))
        .unwrap();
}

#[test]
fn variants_lists_the_ablation_grid() {
    let out = run(tunet().arg("variants"));
    assert_eq!(out.lines().count(), 8);
    assert!(out.contains("Ours/T-UNet"));
    assert!(out.lines().next().unwrap().starts_with("Single/1"));
}

#[test]
fn complexity_emits_json() {
    let out = run(tunet().args([
        "complexity",
        "--variant",
        "Siamese/4",
        "--size",
        "64",
        "--width-divisor",
        "8",
    ]));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!(v["params"].as_u64().unwrap() > 0);
    assert!(v["flops"].as_u64().unwrap() >= v["macs"].as_u64().unwrap());
    let bad = tunet()
        .args(["complexity", "--variant", "Nope"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn render_colours_a_mask_pair() {
    let dir = tempfile::tempdir().unwrap();
    let pred = GrayImage::from_fn(4, 1, |x, _| Luma([if x < 2 { 255 } else { 0 }]));
    let truth = GrayImage::from_fn(4, 1, |x, _| Luma([if x % 2 == 0 { 255 } else { 0 }]));
    pred.save(dir.path().join("p.png")).unwrap();
    truth.save(dir.path().join("t.png")).unwrap();
    let out = dir.path().join("map.png");
    run(tunet()
        .arg("render")
        .arg("--pred")
        .arg(dir.path().join("p.png"))
        .arg("--target")
        .arg(dir.path().join("t.png"))
        .arg("--out")
        .arg(&out));
    let img = image::open(&out).unwrap().to_rgb8();
    let px: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
    assert_eq!(
        px,
        vec![[255, 255, 255], [0, 255, 0], [128, 0, 128], [0, 0, 0]]
    );
}

#[test]
fn prepare_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    write_scene(&raw, "scene_a", 70, 40);
    write_scene(&raw, "scene_b", 32, 32);
    let tiles = dir.path().join("tiles");
    let out = run(tunet()
        .args([
            "prepare", "--tile", "32", "--seed", "3", "--counts", "4,1,2",
        ])
        .arg("--input")
        .arg(&raw)
        .arg("--out")
        .arg(&tiles));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    // 70x40 gives a 3x2 flush-edge grid, 32x32 a single tile
    assert_eq!(v["tiles"], 7);
    assert_eq!(
        (v["train"].as_u64(), v["val"].as_u64(), v["test"].as_u64()),
        (Some(4), Some(1), Some(2))
    );
    assert!(tiles.join("A").join("scene_a_r1_c2.png").exists());

    let ck = dir.path().join("ck");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# tiny smoke run\ninput_size = 32\nwidth_divisor = 16\nepochs = 1\nbatch_size = 4\nlr = 0.001\nseed = 1\ndata_root = {}\ncheckpoint_dir = {}\n",
            tiles.display(),
            ck.display()
        ),
    )
    .unwrap();
    let out = run(tunet()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .env("TUNET_SEED", "77"));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["steps"], 1);
    let checkpoint = ck.join("epoch_0001.safetensors");
    assert_eq!(Checkpoint::load(&checkpoint).unwrap().meta.run.seed, 77);

    let metrics = dir.path().join("metrics.json");
    run(tunet()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&checkpoint)
        .arg("--out")
        .arg(&metrics));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    for key in ["oa", "pre", "rec", "f1"] {
        assert!(m.get(key).is_some(), "missing {key}: {m}");
    }

    let mask = dir.path().join("mask.png");
    let probs = dir.path().join("probs.png");
    run(tunet()
        .arg("predict")
        .arg("--checkpoint")
        .arg(&checkpoint)
        .arg("--image-a")
        .arg(tiles.join("A").join("scene_b_r0_c0.png"))
        .arg("--image-b")
        .arg(tiles.join("B").join("scene_b_r0_c0.png"))
        .arg("--mask")
        .arg(&mask)
        .arg("--probabilities")
        .arg(&probs));
    assert_eq!(
        image::open(&mask).unwrap().to_luma8().dimensions(),
        (32, 32)
    );
    assert_eq!(
        image::open(&probs).unwrap().to_luma8().dimensions(),
        (32, 32)
    );

    let bad = tunet()
        .arg("predict")
        .arg("--checkpoint")
        .arg(&checkpoint)
        .arg("--image-a")
        .arg(raw.join("A").join("scene_a.png"))
        .arg("--image-b")
        .arg(raw.join("B").join("scene_a.png"))
        .arg("--mask")
        .arg(&mask)
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("tile"));
}
