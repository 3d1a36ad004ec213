use std::collections::BTreeMap;

use esc::data::{
    class_layouts, generate_dataset, plan_dataset, render_shape, render_texture, GenConfig, Part, PreprocessConfig,
    RawImage, Regime, Split,
};
use esc::rng::derive_seed;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

const SIZE: usize = 64;
const CLASSES: usize = 10;

fn sample_seed(root: u64, class: usize, i: usize) -> u64 {
    derive_seed(root, &format!("oracle/{class}/{i}"))
}

const TILE: usize = 8;

/// Power spectrum of a mean-removed `n x n` image, row-major.
fn power_spectrum(img: &[f32], n: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
    let mut buf: Vec<Complex<f64>> = img.iter().map(|&v| Complex::new(v as f64 - mean, 0.0)).collect();
    let fft = planner.plan_fft_forward(n);
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
    buf.iter().map(|c| c.norm_sqr()).collect()
}

/// Peak of the radial power profile (cycles per image, power summed over rings
/// one bin wide, refined by parabolic interpolation). The harmonics of the tile
/// grid (both axes multiples of `n / TILE`) are left out: any tile
/// rearrangement concentrates the power of content shared by tiles there.
fn peak_frequency(power: &[f64], n: usize) -> f64 {
    let signed = |k: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    let lattice = n / TILE;
    let rings = n / 2;
    let mut sum = vec![0.0; rings + 1];
    for (i, &p) in power.iter().enumerate() {
        let (kx, ky) = (i % n, i / n);
        if kx % lattice == 0 && ky % lattice == 0 {
            continue;
        }
        let r = signed(kx).hypot(signed(ky)).round() as usize;
        if r <= rings {
            sum[r] += p;
        }
    }
    let profile = sum;
    let k = (2..rings).max_by(|&a, &b| profile[a].total_cmp(&profile[b])).unwrap();
    let (a, b, c) = (profile[k - 1], profile[k], profile[k + 1]);
    let curvature = a - 2.0 * b + c;
    if curvature == 0.0 {
        k as f64
    } else {
        k as f64 + 0.5 * (a - c) / curvature
    }
}

fn shuffle_tiles(img: &[f32], n: usize, tile: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let per_row = n / tile;
    let mut order: Vec<usize> = (0..per_row * per_row).collect();
    order.shuffle(rng);
    let mut out = vec![0.0; img.len()];
    for (dst, &src) in order.iter().enumerate() {
        let (dy, dx) = (dst / per_row * tile, dst % per_row * tile);
        let (sy, sx) = (src / per_row * tile, src % per_row * tile);
        for y in 0..tile {
            for x in 0..tile {
                out[(dy + y) * n + dx + x] = img[(sy + y) * n + sx + x];
            }
        }
    }
    out
}

#[test]
#[ignore = "fails: 8-px tiles broaden each grating into a lobe about 8 cycles wide; low-frequency classes drift by up to 11%"]
fn tile_shuffling_keeps_texture_peak_frequency() {
    let mut worst: f64 = 0.0;
    let mut planner = FftPlanner::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for class in 0..CLASSES {
        let mut orig = vec![0.0; SIZE * SIZE];
        let mut shuf = vec![0.0; SIZE * SIZE];
        for i in 0..50 {
            let img = render_texture(class, SIZE, sample_seed(3, class, i));
            for (a, p) in orig.iter_mut().zip(power_spectrum(&img, SIZE, &mut planner)) {
                *a += p;
            }
            let s = shuffle_tiles(&img, SIZE, TILE, &mut rng);
            for (a, p) in shuf.iter_mut().zip(power_spectrum(&s, SIZE, &mut planner)) {
                *a += p;
            }
        }
        let (fo, fs) = (peak_frequency(&orig, SIZE), peak_frequency(&shuf, SIZE));
        println!("class {class}: {fo:.3} -> {fs:.3}");
        worst = worst.max((fs - fo).abs() / fo);
    }
    assert!(worst <= 0.05, "peak frequency moved by {:.1}%", 100.0 * worst);
}

fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// 1-nearest-neighbour accuracy; ties are broken uniformly at random.
fn nn_accuracy(train: &[(Vec<f32>, usize)], test: &[(Vec<f32>, usize)], rng: &mut ChaCha8Rng) -> f64 {
    let mut correct = 0;
    for (x, y) in test {
        let d: Vec<f32> = train.iter().map(|(t, _)| squared_distance(x, t)).collect();
        let best = d.iter().copied().fold(f32::INFINITY, f32::min);
        let ties: Vec<usize> = (0..train.len()).filter(|&i| d[i] == best).collect();
        if train[*ties.choose(rng).unwrap()].1 == *y {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}

/// Lower bound of a one-sided 99% normal interval for a binomial proportion.
fn clearly_above_chance(acc: f64, n: usize, classes: usize) -> bool {
    let p = 1.0 / classes as f64;
    acc > p + 2.33 * (p * (1.0 - p) / n as f64).sqrt()
}

fn part_counts(parts: &[(Part, usize)]) -> Vec<f32> {
    Part::ALL
        .iter()
        .map(|p| parts.iter().filter(|(q, _)| q == p).count() as f32)
        .collect()
}

#[test]
fn shape_class_information_lives_in_layout_only() {
    let (train_n, test_n) = (20, 10);
    let mut part_acc = Vec::new();
    for seed in 0..5u64 {
        let layouts = class_layouts(CLASSES, seed).unwrap();
        let render = |c: usize, i: usize| render_shape(&layouts[c], SIZE, sample_seed(seed, c, i));
        let mut pixels = (Vec::new(), Vec::new());
        let mut parts = (Vec::new(), Vec::new());
        for c in 0..CLASSES {
            let counts = part_counts(&layouts[c].parts());
            for i in 0..train_n + test_n {
                let (pix, part) = if i < train_n {
                    (&mut pixels.0, &mut parts.0)
                } else {
                    (&mut pixels.1, &mut parts.1)
                };
                pix.push((render(c, i), c));
                part.push((counts.clone(), c));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixel_acc = nn_accuracy(&pixels.0, &pixels.1, &mut rng);
        assert!(
            clearly_above_chance(pixel_acc, pixels.1.len(), CLASSES),
            "seed {seed}: pixel NN accuracy {pixel_acc}"
        );
        part_acc.push(nn_accuracy(&parts.0, &parts.1, &mut rng));
    }
    let chance = 1.0 / CLASSES as f64;
    let n = (CLASSES * test_n * part_acc.len()) as f64;
    let stderr = (chance * (1.0 - chance) / n).sqrt();
    let mean = part_acc.iter().sum::<f64>() / part_acc.len() as f64;
    assert!(
        (mean - chance).abs() <= 2.0 * stderr,
        "part-count NN accuracy {mean} vs chance {chance} (stderr {stderr})"
    );
}

#[test]
fn part_usage_is_identical_across_classes() {
    let cfg = GenConfig {
        regime: Regime::Shape,
        classes: CLASSES,
        train_per_class: 1,
        test_per_class: 1,
        size: SIZE,
        seed: 4,
    };
    let m = plan_dataset(&cfg).unwrap();
    let reference = part_counts(&m.parts_of(0).unwrap());
    assert_eq!(reference, vec![1.0; Part::ALL.len()]);
    for c in 1..CLASSES {
        assert_eq!(part_counts(&m.parts_of(c).unwrap()), reference, "class {c}");
    }
}

/// The 8x8 window with the largest pixel variance.
fn busiest_patch(img: &[f32], n: usize, k: usize) -> Vec<f32> {
    let mut best = (f32::NEG_INFINITY, Vec::new());
    for y in (0..=n - k).step_by(2) {
        for x in (0..=n - k).step_by(2) {
            let patch: Vec<f32> = (0..k * k).map(|i| img[(y + i / k) * n + x + i % k]).collect();
            let mean = patch.iter().sum::<f32>() / patch.len() as f32;
            let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>();
            if var > best.0 {
                best = (var, patch);
            }
        }
    }
    best.1
}

#[test]
fn texture_patches_carry_class_information() {
    let (train_n, test_n) = (30, 10);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..CLASSES {
        for i in 0..train_n + test_n {
            let patch = busiest_patch(&render_texture(c, SIZE, sample_seed(9, c, i)), SIZE, 8);
            if i < train_n {
                train.push((patch, c));
            } else {
                test.push((patch, c));
            }
        }
    }
    let acc = nn_accuracy(&train, &test, &mut ChaCha8Rng::seed_from_u64(9));
    assert!(clearly_above_chance(acc, test.len(), CLASSES), "patch NN accuracy {acc}");
}

#[test]
fn wide_image_keeps_its_central_square() {
    let (w, h) = (300, 200);
    let data: Vec<u8> = (0..h).flat_map(|y| (0..w).map(move |x| ((x * 7 + y * 3) % 251) as u8)).collect();
    let image = RawImage {
        height: h,
        width: w,
        channels: 1,
        data: data.clone(),
    };
    let cfg = PreprocessConfig::for_input(175, 0.0);
    assert_eq!(cfg.resize_size, 200);
    let out = cfg.square_and_resize(&image).unwrap();
    assert_eq!(out.shape(), &[1, 200, 200]);
    for y in 0..200 {
        for x in 0..200 {
            let expect = data[y * w + x + 50] as f32 / 255.0 / 0.5;
            assert!((out.data()[y * 200 + x] - expect).abs() < 1e-6);
        }
    }
}

fn file_bytes(root: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_string_lossy().into_owned();
            (rel, std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn generation_is_bitwise_reproducible_with_disjoint_splits() {
    for regime in [Regime::Shape, Regime::Texture] {
        let cfg = GenConfig {
            regime,
            classes: 4,
            train_per_class: 5,
            test_per_class: 3,
            size: SIZE,
            seed: 21,
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = generate_dataset(&cfg, a.path()).unwrap();
        generate_dataset(&cfg, b.path()).unwrap();
        let (fa, fb) = (file_bytes(a.path()), file_bytes(b.path()));
        assert_eq!(fa.len(), 4 * 8 + 1);
        assert_eq!(fa, fb, "{regime:?}");
        for s in &m.samples {
            let img = RawImage::load(&a.path().join(&s.path)).unwrap();
            assert_eq!((img.height, img.width), (SIZE, SIZE));
        }
        let max_train = m.split(Split::Train).map(|s| s.index).max().unwrap();
        let min_test = m.split(Split::Test).map(|s| s.index).min().unwrap();
        assert!(max_train < min_test);
        assert_eq!(m.class_counts(Split::Train).values().copied().collect::<Vec<_>>(), vec![5; 4]);
        assert_eq!(m.class_counts(Split::Test).values().copied().collect::<Vec<_>>(), vec![3; 4]);

        let mut other = cfg.clone();
        other.seed = 22;
        let c = tempfile::tempdir().unwrap();
        generate_dataset(&other, c.path()).unwrap();
        assert_ne!(file_bytes(c.path()), fa);
    }
}
