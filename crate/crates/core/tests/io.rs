use std::fs;
use std::path::Path;

use layervid::image::Image;
use layervid::trainer::normalize_clip;
use layervid::video_io::{
    generate_scene, load_sequence, quantize, read_mask, read_png, write_mask, write_png, write_sequence, SceneKind,
    SyntheticScene, DEFAULT_PATTERN,
};
use layervid::Error;
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = Image> {
    (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
        prop::collection::vec(-0.2f64..1.2, w * h * 3).prop_map(move |data| Image::new(w, h, data).unwrap())
    })
}

proptest! {
    #[test]
    fn png_round_trip_is_quantization(img in image_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        prop_assert_eq!((back.width, back.height), (img.width, img.height));
        for (b, v) in back.data.iter().zip(&img.data) {
            prop_assert_eq!(*b, quantize(*v) as f64 / 255.0);
        }
        // Already-quantized frames survive exactly.
        write_png(&p, &back).unwrap();
        prop_assert_eq!(read_png(&p).unwrap(), back);
    }

    #[test]
    fn normalized_times_span_unit_interval(gaps in prop::collection::vec(0.01f64..10.0, 1..8), start in -50.0f64..50.0) {
        let mut times = vec![start];
        for g in &gaps {
            times.push(times.last().unwrap() + g);
        }
        let frames = vec![Image::filled(2, 2, 0.5); times.len()];
        let clip = normalize_clip(frames, &times).unwrap();
        prop_assert_eq!(clip.normalized_times[0], -1.0);
        prop_assert_eq!(*clip.normalized_times.last().unwrap(), 1.0);
        for w in clip.normalized_times.windows(2) {
            prop_assert!(w[1] > w[0]);
        }
        for (&t, &n) in times.iter().zip(&clip.normalized_times) {
            prop_assert!((clip.meta.denormalize_time(n) - t).abs() <= 1e-9 * t.abs().max(1.0));
        }
    }
}

#[test]
fn sequence_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let frames: Vec<Image> = (0..3).map(|k| Image::filled(5, 4, k as f64 / 4.0)).collect();
    let times = [0.0, 0.04, 0.1];
    let manifest = write_sequence(&frames, &times, dir.path(), DEFAULT_PATTERN).unwrap();
    let (back, back_times) = load_sequence(&manifest).unwrap();
    assert_eq!(back_times, times);
    assert_eq!(back.len(), 3);
    assert!(dir.path().join("frame_00002.png").exists());
    for (b, f) in back.iter().zip(&frames) {
        assert!(b.data.iter().zip(&f.data).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0));
    }
}

fn manifest_with(dir: &Path, body: &str) -> std::path::PathBuf {
    write_png(dir.join("a.png"), &Image::filled(4, 4, 0.5)).unwrap();
    write_png(dir.join("b.png"), &Image::filled(4, 4, 0.5)).unwrap();
    let p = dir.join("manifest.json");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn manifest_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let case = |body: &str| load_sequence(manifest_with(d, body)).unwrap_err().to_string();

    let missing = case(r#"{"frames":[{"file":"a.png","time":0},{"file":"gone.png","time":1}],"width":4,"height":4,"color_space":"srgb8"}"#);
    assert!(missing.contains("gone.png"), "{}", missing);
    let order = case(r#"{"frames":[{"file":"a.png","time":1},{"file":"b.png","time":1}],"width":4,"height":4,"color_space":"srgb8"}"#);
    assert!(order.contains("increasing"), "{}", order);
    let space = case(r#"{"frames":[{"file":"a.png","time":0}],"width":4,"height":4,"color_space":"linear"}"#);
    assert!(space.contains("srgb8"), "{}", space);
    let size = case(r#"{"frames":[{"file":"a.png","time":0}],"width":5,"height":4,"color_space":"srgb8"}"#);
    assert!(size.contains("a.png") && size.contains("5x4"), "{}", size);
    let unknown = case(r#"{"frames":[],"width":4,"height":4,"color_space":"srgb8","fps":30}"#);
    assert!(unknown.contains("fps"), "{}", unknown);
}

#[test]
fn alpha_frames_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rgba.png");
    let mut enc = png::Encoder::new(fs::File::create(&p).unwrap(), 2, 2);
    enc.set_color(png::ColorType::Rgba);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header().unwrap().write_image_data(&[255; 16]).unwrap();
    let err = read_png(&p).unwrap_err();
    assert!(matches!(err, Error::Decode { .. }));
    assert!(err.to_string().contains("alpha"));
}

#[test]
fn masks_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.png");
    let ids: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
    write_mask(&p, 4, 3, &ids).unwrap();
    assert_eq!(read_mask(&p).unwrap(), (4, 3, ids));
    assert!(write_mask(&p, 4, 4, &[0; 12]).is_err());
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "train", "held_out"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names.into_iter().filter(|p| p.is_file()) {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn scene_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for kind in [SceneKind::LinearSquare, SceneKind::TwoMovers, SceneKind::Camouflage] {
        for dir in [&a, &b] {
            let scene = SyntheticScene::new(kind, (24, 20), 7);
            generate_scene(&scene, 3, (24, 20)).unwrap().write(dir.path()).unwrap();
        }
        let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
        // scene.json; 3 frames, 3 masks, manifest; 1 held-out frame, mask, manifest.
        assert_eq!(ta.len(), 1 + 7 + 3);
        assert_eq!(ta, tb, "{}", kind);
    }
}
