use std::path::Path;

use ipf::cli::{main_with_args, EXIT_OK, EXIT_RUNTIME};
use ipf::media::{load_frame_sequence, save_frame};
use ipf::ImageTensor;

const FAST_CONFIG: &str = r#"
steps_scale = 1.0
seed = 7
[presets.image-pretrain]
steps = 60
lr_initial = 1e-2
lr_final = 1e-3
[presets.initial-iframe]
steps = 60
lr_initial = 1e-2
lr_final = 1e-3
[presets.image-qat]
steps = 10
lr_initial = 2e-5
lr_final = 2e-5
[presets.initial-flow]
steps = 10
lr_initial = 1e-3
lr_final = 1e-4
[presets.initial-flow-quant]
steps = 5
lr_initial = 1e-4
lr_final = 1e-5
[presets.other-flow-quant]
steps = 5
lr_initial = 1e-4
lr_final = 1e-5
[presets.residual-training]
steps = 10
lr_initial = 1e-3
lr_final = 1e-4
"#;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = main_with_args(args.iter().copied(), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pattern(h: usize, w: usize, shift: usize) -> ImageTensor {
    let data = (0..h * w * 3)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            let (y, x) = (p / w, (p % w + shift) as f64);
            0.5 + 0.35 * (x / 3.0 + c as f64).sin() * (y as f64 / 4.0).cos()
        })
        .collect();
    ImageTensor::new(h, w, 3, data).unwrap().to_8bit_levels()
}

fn reported_psnr(report: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix("mean psnr "))
        .and_then(|l| l.trim_end_matches(" dB").parse().ok())
        .expect("mean psnr line")
}

#[test]
fn image_encode_decode_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let img = d.join("in.png");
    save_frame(&pattern(16, 16, 0), &img).unwrap();
    let cfg = d.join("fast.toml");
    std::fs::write(&cfg, FAST_CONFIG).unwrap();
    let ipf_a = d.join("a.ipf");
    let ipf_b = d.join("b.ipf");

    let encode = |out: &Path| {
        run(&["ipf", "encode", s(&img), "-o", s(out), "--preset", "kodak-1", "--config", s(&cfg)])
    };
    let (code, report, err) = encode(&ipf_a);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(report.contains("total bytes"), "{report}");
    let (code, _, _) = encode(&ipf_b);
    assert_eq!(code, EXIT_OK);
    let bytes = std::fs::read(&ipf_a).unwrap();
    assert_eq!(bytes, std::fs::read(&ipf_b).unwrap(), "same seed, same bytes");
    assert!(report.contains(&format!("total bytes {}", bytes.len())));

    let out_dir = d.join("decoded");
    let (code, _, err) = run(&["ipf", "decode", s(&ipf_a), "-o", s(&out_dir)]);
    assert_eq!(code, EXIT_OK, "{err}");
    let decoded = load_frame_sequence(&out_dir).unwrap();
    assert_eq!(decoded.len(), 1);

    let csv = d.join("rd.csv");
    let (code, _, err) = run(&[
        "ipf", "eval", s(&img), s(&ipf_a), s(&out_dir), "-o", s(&csv), "--gnuplot", s(&d.join("rd.dat")),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    let encoded_psnr = reported_psnr(&report);
    for row in &rows {
        let p: f64 = row[3].parse().unwrap();
        assert!((p - encoded_psnr).abs() < 1e-6, "{p} vs {encoded_psnr}");
    }
    let bpp: f64 = rows[0][2].parse().unwrap();
    assert!((bpp - 8.0 * bytes.len() as f64 / 256.0).abs() < 1e-6);

    let (code, inspect, _) = run(&["ipf", "inspect", s(&ipf_a)]);
    assert_eq!(code, EXIT_OK);
    assert!(inspect.contains("mean bits/parameter"));
    assert!(inspect.contains(&format!("{}", bytes.len())));

    let mut corrupt = bytes.clone();
    corrupt[0] = b'J';
    let bad = d.join("bad.ipf");
    std::fs::write(&bad, corrupt).unwrap();
    let (code, _, err) = run(&["ipf", "decode", s(&bad), "-o", s(&out_dir)]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("not an IPF file"));

    let missing = d.join("nope");
    let (code, _, err) = run(&["ipf", "decode", s(&ipf_a), "-o", s(&missing), "--no-create"]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("does not exist"));
}

#[test]
fn video_encode_reports_residual_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let frames_dir = d.join("frames");
    std::fs::create_dir(&frames_dir).unwrap();
    for t in 0..5 {
        save_frame(&pattern(16, 16, t), frames_dir.join(format!("f{t}.png"))).unwrap();
    }
    let cfg = d.join("fast.toml");
    std::fs::write(&cfg, FAST_CONFIG).unwrap();
    let out = d.join("v.ipf");
    let metrics = d.join("frames.csv");
    let (code, report, err) = run(&[
        "ipf", "encode", s(&frames_dir), "-o", s(&out), "--preset", "kodak-1", "--config", s(&cfg),
        "--residual", "auto", "--metrics", s(&metrics), "--workers", "1",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(report.contains("gop 0: residual"), "{report}");
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(2).unwrap().contains(",P,"));

    let dec = d.join("dec");
    assert_eq!(run(&["ipf", "decode", s(&out), "-o", s(&dec), "--format", "ppm"]).0, EXIT_OK);
    let (code, _, _) = run(&["ipf", "eval", s(&frames_dir), s(&out), "-o", s(&d.join("rd.csv"))]);
    assert_eq!(code, EXIT_OK);
    let rd = std::fs::read_to_string(d.join("rd.csv")).unwrap();
    let p: f64 = rd.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!((p - reported_psnr(&report)).abs() < 1e-6);
}
