use std::path::PathBuf;

use proptest::prelude::*;
use tivode::shapesdata::{
    caption_for, caption_words, draw_specs, generate, make_sample, parse_caption, read_dataset, render_continuous,
    sample_seed, shard_name, trajectory, write_dataset, Glyph, MotionPattern, ShapeSpec, Split,
};
use tivode::Error;

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("shapesdata").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn square(pattern: MotionPattern) -> ShapeSpec {
    ShapeSpec {
        glyph: Glyph::Square,
        size: 8.0,
        intensity: 1.0,
        row: 12.0,
        col: 12.0,
        pattern,
        amplitude: 8.0,
    }
}

#[test]
fn trajectory_follows_half_sine() {
    let s = square(MotionPattern::UpThenDown);
    let (r, c) = trajectory(&s, 0.25);
    assert!((r - (12.0 - 8.0 * std::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-12);
    assert!((12.0 - r - 5.657).abs() < 1e-3);
    assert_eq!(c, 12.0);
    let (r, _) = trajectory(&s, 0.5);
    assert!((r - 4.0).abs() < 1e-12);
    let (r, _) = trajectory(&s, 1.0);
    assert!((r - 12.0).abs() < 1e-12);
    let (_, c) = trajectory(&square(MotionPattern::RightThenLeft), 0.5);
    assert!((c - 20.0).abs() < 1e-12);
    assert_eq!(trajectory(&square(MotionPattern::Static), 0.37), (12.0, 12.0));
}

#[test]
fn static_shape_renders_identical_frames() {
    let s = make_sample(sample_seed(Split::Train, 0, 3), 1, 6, 32, 32).unwrap();
    let specs = draw_specs(s.seed, 1, 32, 32).unwrap();
    if specs[0].pattern == MotionPattern::Static {
        assert!(s.frames.iter().all(|f| f == &s.frames[0]));
    }
    let img0 = render_continuous(&[square(MotionPattern::Static)], 0.0, 32, 32);
    let img1 = render_continuous(&[square(MotionPattern::Static)], 0.8, 32, 32);
    assert_eq!(img0, img1);
}

#[test]
fn square_on_integer_grid_covers_exactly_its_area() {
    for size in [3.0, 7.0, 10.0] {
        let s = ShapeSpec { size, ..square(MotionPattern::Static) };
        let total: f64 = render_continuous(&[s], 0.0, 32, 32).iter().sum();
        assert_eq!(total, size * size);
        for i in 0..32 {
            for j in 0..32 {
                let inside = (12..12 + size as usize).contains(&i) && (12..12 + size as usize).contains(&j);
                assert_eq!(s.covers(0.0, i, j), inside, "pixel ({i}, {j})");
            }
        }
    }
}

#[test]
fn frames_are_on_the_byte_lattice_and_in_range() {
    let s = make_sample(11, 3, 5, 32, 32).unwrap();
    assert_eq!(s.frames.len(), 5);
    assert_eq!(s.times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    for f in &s.frames {
        assert_eq!(f.len(), 32 * 32);
        for &v in f {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }
}

#[test]
fn drawn_specs_stay_on_canvas_and_use_distinct_glyphs() {
    for seed in 0..200 {
        for n in 1..=3 {
            let specs = draw_specs(seed, n, 32, 32).unwrap();
            assert_eq!(specs.len(), n);
            for s in &specs {
                s.validate(32, 32).unwrap();
            }
            let mut glyphs: Vec<Glyph> = specs.iter().map(|s| s.glyph).collect();
            glyphs.dedup();
            glyphs.sort();
            glyphs.dedup();
            assert_eq!(glyphs.len(), n);
        }
    }
    assert!(draw_specs(0, 0, 32, 32).is_err());
    assert!(draw_specs(0, 5, 32, 32).is_err());
    assert!(draw_specs(0, 1, 4, 40).is_err());
}

#[test]
fn caption_follows_template_and_parses_back() {
    let specs = [square(MotionPattern::LeftThenRight), ShapeSpec { glyph: Glyph::Circle, ..square(MotionPattern::Static) }];
    let caption = caption_for(&specs);
    assert_eq!(caption, "the square moves left then right and the circle stays still");
    assert_eq!(
        parse_caption(&caption).unwrap(),
        vec![(Glyph::Square, MotionPattern::LeftThenRight), (Glyph::Circle, MotionPattern::Static)]
    );
    for w in caption.split_whitespace() {
        assert!(caption_words().contains(&w));
    }
    assert!(parse_caption("a square moves").is_err());
    assert!(parse_caption("the hexagon stays still").is_err());
}

#[test]
fn reversal_is_an_involution() {
    for p in MotionPattern::ALL {
        assert_eq!(p.reversed().reversed(), p);
        assert_eq!(p.reversed() == p, p == MotionPattern::Static);
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = scratch("round_trip");
    let (info, samples) = generate(Split::Val, 4, 130, 2, 4, 32, 32).unwrap();
    write_dataset(&dir, &info, &samples).unwrap();
    assert!(dir.join(shard_name(1)).exists());
    let (back_info, back) = read_dataset(&dir).unwrap();
    assert_eq!(back_info, info);
    assert_eq!(back, samples);
}

#[test]
fn default_dataset_stays_small() {
    let dir = scratch("size");
    let (info, samples) = generate(Split::Train, 0, 200, 1, 8, 32, 32).unwrap();
    write_dataset(&dir, &info, &samples).unwrap();
    let bytes: u64 = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().metadata().unwrap().len()).sum();
    assert!(bytes < 10 * 1024 * 1024, "{bytes} bytes");
}

#[test]
fn truncated_shard_is_a_format_error() {
    let dir = scratch("truncated");
    let (info, samples) = generate(Split::Train, 1, 3, 1, 4, 16, 16).unwrap();
    write_dataset(&dir, &info, &samples).unwrap();
    let shard = dir.join(shard_name(0));
    let bytes = std::fs::read(&shard).unwrap();
    std::fs::write(&shard, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(read_dataset(&dir), Err(Error::Format { .. })));

    let mut long = bytes.clone();
    long.push(0);
    std::fs::write(&shard, &long).unwrap();
    assert!(matches!(read_dataset(&dir), Err(Error::Format { .. })));

    std::fs::write(&shard, &bytes).unwrap();
    let manifest = std::fs::read_to_string(dir.join("manifest.txt")).unwrap();
    std::fs::write(dir.join("manifest.txt"), manifest.replace("format_version=1", "format_version=9")).unwrap();
    assert!(matches!(read_dataset(&dir), Err(Error::Format { .. })));
}

#[test]
fn splits_draw_disjoint_seeds() {
    let mut seen = std::collections::HashSet::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for base in 0..3 {
            for i in 0..500 {
                assert!(seen.insert(sample_seed(split, base, i)));
            }
        }
    }
    let (_, train) = generate(Split::Train, 0, 50, 1, 2, 32, 32).unwrap();
    let (_, test) = generate(Split::Test, 0, 50, 1, 2, 32, 32).unwrap();
    assert!(train.iter().all(|a| test.iter().all(|b| a.seed != b.seed)));
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(make_sample(99, 2, 8, 32, 32).unwrap(), make_sample(99, 2, 8, 32, 32).unwrap());
    assert_ne!(make_sample(99, 2, 8, 32, 32).unwrap().frames, make_sample(100, 2, 8, 32, 32).unwrap().frames);
}

proptest! {
    #[test]
    fn any_seed_yields_a_valid_sample(seed in any::<u64>(), n in 1usize..=3) {
        let s = make_sample(seed, n, 3, 32, 32).unwrap();
        prop_assert_eq!(parse_caption(&s.caption).unwrap().len(), n);
        prop_assert!(s.frames[0].iter().any(|&v| v > 0.0));
    }
}
