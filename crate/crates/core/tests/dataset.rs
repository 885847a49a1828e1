mod common;

use std::collections::HashMap;

use dhm_core::dataset::{generate_synthetic, load_dataset, split_dataset, write_dataset, write_label_png};
use dhm_core::{Error, ImageSample, Split, SyntheticSpec, VOID};

fn noiseless() -> SyntheticSpec {
    SyntheticSpec {
        noise_level: 0.0,
        ..common::spec(7, 64)
    }
}

fn class_centroids(samples: &[ImageSample], k: usize) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0.0; k];
    for s in samples {
        for (p, &l) in s.pixels.iter().zip(&s.labels) {
            for c in 0..3 {
                sums[l as usize][c] += p[c] as f64;
            }
            counts[l as usize] += 1.0;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| [s[0] / n, s[1] / n, s[2] / n])
        .collect()
}

#[test]
fn noiseless_classes_are_separable_by_mean_color() {
    let d = generate_synthetic(&noiseless(), 20).unwrap();
    let centroids = class_centroids(&d.samples, 4);
    for s in &d.samples {
        let mut by_class: HashMap<u8, ([f64; 3], f64)> = HashMap::new();
        for (p, &l) in s.pixels.iter().zip(&s.labels) {
            let e = by_class.entry(l).or_insert(([0.0; 3], 0.0));
            for c in 0..3 {
                e.0[c] += p[c] as f64;
            }
            e.1 += 1.0;
        }
        for (&label, (sum, n)) in &by_class {
            let mean = [sum[0] / n, sum[1] / n, sum[2] / n];
            let nearest = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = (0..3).map(|c| (mean[c] - centroids[a][c]).powi(2)).sum();
                    let db: f64 = (0..3).map(|c| (mean[c] - centroids[b][c]).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, label as usize, "{}: class {label} misassigned", s.id);
        }
    }
}

/// Majority label per quantized (gray, aux channels) cell, fitted on `train`.
fn cell_classifier_accuracy(train: &[ImageSample], test: &[ImageSample]) -> f64 {
    let key = |s: &ImageSample, i: usize| -> Vec<u8> {
        let p = s.pixels[i];
        let mut k = vec![((p[0] as u16 + p[1] as u16 + p[2] as u16) / 3 / 64) as u8];
        k.extend(s.channels.iter().map(|c| c[i] / 128));
        k
    };
    let mut table: HashMap<Vec<u8>, [u64; 4]> = HashMap::new();
    for s in train {
        for i in 0..s.len() {
            table.entry(key(s, i)).or_default()[s.labels[i] as usize] += 1;
        }
    }
    let mut global = [0u64; 4];
    table.values().for_each(|c| (0..4).for_each(|j| global[j] += c[j]));
    let majority = |c: &[u64; 4]| (0..4).max_by_key(|&j| (c[j], std::cmp::Reverse(j))).unwrap();
    let fallback = majority(&global);
    let (mut hit, mut n) = (0u64, 0u64);
    for s in test {
        for i in 0..s.len() {
            let guess = table.get(&key(s, i)).map_or(fallback, majority);
            hit += (guess == s.labels[i] as usize) as u64;
            n += 1;
        }
    }
    hit as f64 / n as f64
}

fn max_prior(samples: &[ImageSample]) -> f64 {
    let mut counts = [0u64; 4];
    for s in samples {
        for (c, n) in counts.iter_mut().zip(s.label_counts()) {
            *c += n;
        }
    }
    *counts.iter().max().unwrap() as f64 / counts.iter().sum::<u64>() as f64
}

/// Per class, the mean gray level followed by the mean of every aux channel.
fn class_feature_means(samples: &[ImageSample]) -> Vec<Vec<f64>> {
    let dims = 1 + samples[0].channels.len();
    let mut sums = vec![vec![0.0; dims]; 4];
    let mut counts = [0.0; 4];
    for s in samples {
        for i in 0..s.len() {
            let c = s.labels[i] as usize;
            let p = s.pixels[i];
            sums[c][0] += (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0;
            for (j, ch) in s.channels.iter().enumerate() {
                sums[c][1 + j] += ch[i] as f64;
            }
            counts[c] += 1.0;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(v, n)| v.into_iter().map(|x| x / n).collect())
        .collect()
}

#[test]
fn uninformative_channels_give_prior_accuracy() {
    let spec = SyntheticSpec {
        informativeness: vec![0.0; 5],
        ..common::spec(11, 32)
    };
    let d = generate_synthetic(&spec, 50).unwrap();
    let means = class_feature_means(&d.samples);
    for dim in 0..means[0].len() {
        let values: Vec<f64> = means.iter().map(|m| m[dim]).collect();
        let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 8.0, "feature {dim} differs across classes: {values:?}");
    }
    let (train, test) = d.samples.split_at(25);
    let acc = cell_classifier_accuracy(train, test);
    let prior = max_prior(test);
    assert!(acc <= prior + 0.05, "accuracy {acc} vs max prior {prior}");

    let informative = generate_synthetic(&common::spec(11, 32), 50).unwrap();
    let (train, test) = informative.samples.split_at(25);
    assert!(cell_classifier_accuracy(train, test) > max_prior(test) + 0.1);
}

#[test]
fn noiseless_region_labels_agree_with_appearance() {
    let d = generate_synthetic(&noiseless(), 10).unwrap();
    let centroids = class_centroids(&d.samples, 4);
    let (mut agree, mut total) = (0usize, 0usize);
    for s in &d.samples {
        let tree = common::tree_of(s);
        for node in tree.layer_nodes(tree.finest_layer()).filter(|n| n.area >= 16) {
            let pixels = tree.pixels_of(node.id);
            let mut counts = [0usize; 4];
            let mut mean = [0.0; 3];
            for &p in &pixels {
                counts[s.labels[p] as usize] += 1;
                for c in 0..3 {
                    mean[c] += s.pixels[p][c] as f64 / pixels.len() as f64;
                }
            }
            let dominant = (0..4).max_by_key(|&c| counts[c]).unwrap();
            let nearest = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = (0..3).map(|c| (mean[c] - centroids[a][c]).powi(2)).sum();
                    let db: f64 = (0..3).map(|c| (mean[c] - centroids[b][c]).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            total += 1;
            agree += (dominant == nearest) as usize;
        }
    }
    assert!(agree as f64 >= 0.99 * total as f64, "{agree} of {total} regions agree");
}

#[test]
fn disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_synthetic(&common::spec(3, 16), 3).unwrap();
    write_dataset(&d, dir.path()).unwrap();
    let back = load_dataset(dir.path(), 4).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in d.samples.iter().zip(&back.samples) {
        assert_eq!(a, b);
    }
}

#[test]
fn void_labels_load_and_bad_pairs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = generate_synthetic(&common::spec(3, 64), 3).unwrap();
    d.samples[0].labels[0] = VOID;
    write_dataset(&d, dir.path()).unwrap();
    let back = load_dataset(dir.path(), 5).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.samples[0].labels[0], VOID);

    let id = &d.samples[1].id;
    write_label_png(&dir.path().join("labels").join(format!("{id}.png")), 32, 32, &[0; 32 * 32]).unwrap();
    assert!(matches!(load_dataset(dir.path(), 5), Err(Error::DimensionMismatch { .. })));

    std::fs::remove_file(dir.path().join("labels").join(format!("{id}.png"))).unwrap();
    assert!(matches!(load_dataset(dir.path(), 5), Err(Error::MissingFile { .. })));
}

#[test]
fn split_fractions() {
    let d = generate_synthetic(&common::spec(1, 16), 10).unwrap();
    let a = split_dataset(d.clone(), [0.6, 0.2, 0.2], 1).unwrap();
    assert_eq!(
        [Split::Train, Split::Val, Split::Test].map(|s| a.indices(s).len()),
        [6, 2, 2]
    );
    assert_eq!(a, split_dataset(d.clone(), [0.6, 0.2, 0.2], 1).unwrap());
    assert!(split_dataset(d, [0.5, 0.5, 0.5], 1).is_err());
}
