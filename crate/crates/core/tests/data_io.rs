use std::path::Path;

use vdvae::arch::{BlockSpec, DownsampleMode, ModelConfig, PriorMode};
use vdvae::data::{
    decode_checkpoint, decode_cifar_records, encode_checkpoint, generate_synthetic, load_checkpoint, load_cifar10_binary,
    rect_sides, read_ppm, save_checkpoint, synthetic_palette, write_ppm, write_ppm_grid, RgbImage, SyntheticConfig,
    CIFAR_RECORD,
};
use vdvae::trainer::{NormStats, TrainConfig, TrainState};

fn tiny_state() -> TrainState {
    let model = ModelConfig {
        width: 8,
        bottleneck_ratio: 0.5,
        zdim: 2,
        enc_spec: BlockSpec::parse("8x1,1x1").unwrap(),
        dec_spec: BlockSpec::parse("1x1,8x1").unwrap(),
        image_size: 8,
        image_channels: 3,
        prior_mode: PriorMode::Separate,
        ff_group_size: 4,
        dmol_mixtures: 2,
        residual_scaling: true,
        downsample: DownsampleMode::AvgPool,
        independent_group: 1,
    };
    let norm = NormStats {
        mean: vec![120.0, 110.0, 100.0],
        std: vec![60.0, 50.0, 40.0],
    };
    let mut s = TrainState::new(model, TrainConfig::default(), norm).unwrap();
    s.step = 17;
    s.applied = 15;
    s.skip_count = 2;
    s
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let state = tiny_state();
    let a = dir.path().join("a.vdvc");
    save_checkpoint(&a, &state).unwrap();
    let back = load_checkpoint(&a).unwrap();
    assert_eq!(back, state);
    let b = dir.path().join("b.vdvc");
    save_checkpoint(&b, &back).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn checkpoint_size_is_four_bytes_per_value_plus_overhead() {
    let state = tiny_state();
    let bytes = encode_checkpoint(&state).unwrap();
    // params, ema and two Adam moments.
    let values = 4 * state.params.count() + 6;
    assert!(bytes.len() > 4 * values);
    // Per-entry headers are a name plus at most four dims.
    let entries = 4 * state.params.len() + 2;
    assert!(bytes.len() < 4 * values + entries * (2 + 40 + 1 + 32) + 1024, "{} bytes", bytes.len());
}

#[test]
fn corrupted_or_truncated_checkpoints_are_rejected() {
    let bytes = encode_checkpoint(&tiny_state()).unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(decode_checkpoint(&flipped).is_err());
    let mut crc = bytes.clone();
    let last = crc.len() - 1;
    crc[last] ^= 1;
    assert!(decode_checkpoint(&crc).is_err());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());
    // A future version with a valid checksum is still refused.
    let mut version = bytes[..bytes.len() - 4].to_vec();
    version[4] = version[4].wrapping_add(1);
    let crc = crc32fast::hash(&version);
    version.extend_from_slice(&crc.to_le_bytes());
    let err = decode_checkpoint(&version).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

fn cifar_record(label: u8, seed: u8) -> Vec<u8> {
    let mut rec = vec![label];
    for c in 0..3u8 {
        rec.extend((0..1024u32).map(|p| (p as u8).wrapping_mul(3).wrapping_add(c * 85).wrapping_add(seed)));
    }
    rec
}

#[test]
fn cifar_records_are_planar_rgb_after_a_label() {
    let bytes = [cifar_record(7, 0), cifar_record(2, 9)].concat();
    assert_eq!(bytes.len(), 2 * CIFAR_RECORD);
    let ds = decode_cifar_records(&bytes, Path::new("mem")).unwrap();
    assert_eq!((ds.len(), ds.height(), ds.width(), ds.channels()), (2, 32, 32, 3));
    for (i, seed) in [0u8, 9].into_iter().enumerate() {
        let img = ds.image(i);
        for p in [0usize, 1, 31, 32, 500, 1023] {
            for c in 0..3 {
                let want = (p as u8).wrapping_mul(3).wrapping_add(c as u8 * 85).wrapping_add(seed);
                assert_eq!(img[p * 3 + c], want, "image {i} pixel {p} channel {c}");
            }
        }
    }
    assert!(decode_cifar_records(&bytes[..CIFAR_RECORD + 5], Path::new("mem")).is_err());
}

#[test]
fn cifar_directory_split_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_cifar10_binary(dir.path(), 0).is_err());
    for b in 1..=5 {
        let recs: Vec<u8> = (0..4u8).flat_map(|i| cifar_record(i, b * 10 + i)).collect();
        std::fs::write(dir.path().join(format!("data_batch_{b}.bin")), recs).unwrap();
    }
    std::fs::write(dir.path().join("test_batch.bin"), cifar_record(1, 200)).unwrap();
    let s = load_cifar10_binary(dir.path(), 3).unwrap();
    assert_eq!(s.train.len() + s.val.len(), 20);
    assert_eq!(s.val.len(), 2);
    assert_eq!(s.test.as_ref().unwrap().len(), 1);
    let again = load_cifar10_binary(dir.path(), 3).unwrap();
    assert_eq!(again.val.pixels(), s.val.pixels());
}

#[test]
fn flat_palette_without_texture_gives_identical_images() {
    let cfg = SyntheticConfig {
        n: 20,
        size: 8,
        palette_k: 1,
        texture_scale: 0,
        seed: 4,
    };
    let ds = generate_synthetic(&cfg).unwrap();
    let color = synthetic_palette(&cfg)[0];
    assert!(ds.pixels().chunks(3).all(|p| p == color));
    assert_eq!(generate_synthetic(&cfg).unwrap().pixels(), ds.pixels());
}

/// Analytic marginal of one channel: every pixel takes each palette color
/// with probability 1/k, plus uniform integer noise, clamped to [0, 255].
fn analytic_channel_histogram(palette: &[[u8; 3]], c: usize, t: i32) -> Vec<f64> {
    let mut h = vec![0.0; 256];
    let k = palette.len() as f64;
    let width = (2 * t + 1) as f64;
    for col in palette {
        for d in -t..=t {
            let v = (col[c] as i32 + d).clamp(0, 255) as usize;
            h[v] += 1.0 / (k * width);
        }
    }
    h
}

#[test]
fn synthetic_histogram_matches_generator_mixture() {
    let cfg = SyntheticConfig {
        n: 3000,
        size: 8,
        palette_k: 4,
        texture_scale: 5,
        seed: 11,
    };
    let ds = generate_synthetic(&cfg).unwrap();
    let palette = synthetic_palette(&cfg);
    for c in 0..3 {
        let want = analytic_channel_histogram(&palette, c, 5);
        let mut got = vec![0.0; 256];
        for p in ds.pixels().chunks(3) {
            got[p[c] as usize] += 1.0;
        }
        let total = (ds.len() * 64) as f64;
        for v in 0..256 {
            // Pixels within an image are dependent, so allow a loose bound.
            let sd = (total * want[v] * (1.0 - want[v])).sqrt();
            assert!((got[v] - total * want[v]).abs() <= 6.0 * sd.max(1.0) * 8.0_f64.sqrt(), "channel {c} value {v}");
        }
    }
}

#[test]
fn rectangle_occupancy_matches_enumeration() {
    // With two palette colors and no noise, a pixel is foreground exactly
    // when it differs from the image's most common color.
    let cfg = SyntheticConfig {
        n: 4000,
        size: 8,
        palette_k: 2,
        texture_scale: 0,
        seed: 1,
    };
    let ds = generate_synthetic(&cfg).unwrap();
    let (lo, hi) = rect_sides(8);
    let mut want = [[0.0f64; 8]; 8];
    let mut cases = 0.0;
    for rw in lo..=hi {
        for rh in lo..=hi {
            let places = ((8 - rw + 1) * (8 - rh + 1)) as f64;
            for x0 in 0..=8 - rw {
                for y0 in 0..=8 - rh {
                    for y in y0..y0 + rh {
                        for x in x0..x0 + rw {
                            want[y][x] += 1.0 / places;
                        }
                    }
                }
            }
            cases += 1.0;
        }
    }
    let mut got = [[0.0f64; 8]; 8];
    for i in 0..ds.len() {
        let img = ds.image(i);
        let px: Vec<&[u8]> = img.chunks(3).collect();
        // The rectangle covers at most a quarter of the image.
        let bg = if px.iter().filter(|p| *p == &px[0]).count() > 32 { px[0] } else { px.iter().find(|p| *p != &px[0]).unwrap() };
        for (j, p) in px.iter().enumerate() {
            if *p != bg {
                got[j / 8][j % 8] += 1.0;
            }
        }
    }
    let n = ds.len() as f64;
    for y in 0..8 {
        for x in 0..8 {
            let p = want[y][x] / cases;
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((got[y][x] - n * p).abs() < 5.0 * sd, "pixel ({x}, {y}): {} vs {}", got[y][x], n * p);
        }
    }
}

#[test]
fn ppm_round_trip_and_grid_layout() {
    let dir = tempfile::tempdir().unwrap();
    let img = RgbImage::new(3, 2, (0..18).collect()).unwrap();
    let path = dir.path().join("one.ppm");
    write_ppm(&path, &img).unwrap();
    assert_eq!(read_ppm(&path).unwrap(), img);
    let grid = dir.path().join("grid.ppm");
    write_ppm_grid(&grid, &vec![img.clone(); 5]).unwrap();
    let g = read_ppm(&grid).unwrap();
    // Five tiles in a 3x2 arrangement with 2 pixel gutters.
    assert_eq!((g.width, g.height), (3 * 3 + 2 * 2, 2 * 2 + 2));
}
