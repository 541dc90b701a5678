use std::collections::{BTreeMap, HashMap};
use std::fs;

use cbamnet_core::data::{
    batches, generate_synthetic, load_selection, read_manifest, scan_dataset, split_stratified,
    synthetic_image, write_manifest, Label, Magnification, Manifest, SampleRecord, Split,
    SplitConfig,
};
use cbamnet_core::preprocess::{write_pnm, Image, PreprocessConfig};
use cbamnet_core::Error;

fn variance_of_laplacian(img: &Image) -> f64 {
    let (h, w) = (img.height(), img.width());
    let p = |y: usize, x: usize| img.get(y, x, 0) as f64;
    let mut vals = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            vals.push(p(y - 1, x) + p(y + 1, x) + p(y, x - 1) + p(y, x + 1) - 4.0 * p(y, x));
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
}

#[test]
fn laplacian_threshold_separates_synthetic_classes() {
    let mut scored = Vec::new();
    for label in Label::ALL {
        for mag in Magnification::ALL {
            for i in 0..40 {
                let img = synthetic_image(label, mag, i, (96, 96), 11).unwrap();
                scored.push((variance_of_laplacian(&img), label == Label::Malignant));
            }
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Best single threshold: everything above it is called malignant.
    let n = scored.len();
    let best = (0..=n)
        .map(|cut| {
            let correct = scored[..cut].iter().filter(|s| !s.1).count()
                + scored[cut..].iter().filter(|s| s.1).count();
            correct as f64 / n as f64
        })
        .fold(0.0, f64::max);
    assert!(best >= 0.99, "threshold accuracy {best}");
}

#[test]
fn synth_tree_scans_to_expected_records() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(generate_synthetic(dir.path(), 1, (24, 24), 0).unwrap(), 8);
    let m = scan_dataset(dir.path()).unwrap();
    assert_eq!(m.records.len(), 8);
    for r in &m.records {
        assert!(r.path.starts_with(r.label.as_str()));
        assert!(r.path.contains(r.magnification.as_str()));
    }
    let mut paths: Vec<_> = m.records.iter().map(|r| r.path.clone()).collect();
    paths.sort();
    assert_eq!(
        paths,
        m.records.iter().map(|r| r.path.clone()).collect::<Vec<_>>()
    );
    assert_eq!(scan_dataset(dir.path()).unwrap().fingerprint, m.fingerprint);
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(a.path(), 2, (20, 20), 4).unwrap();
    generate_synthetic(b.path(), 2, (20, 20), 4).unwrap();
    let (ma, mb) = (
        scan_dataset(a.path()).unwrap(),
        scan_dataset(b.path()).unwrap(),
    );
    assert_eq!(ma.fingerprint, mb.fingerprint);
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(c.path(), 2, (20, 20), 5).unwrap();
    assert_ne!(scan_dataset(c.path()).unwrap().fingerprint, ma.fingerprint);
}

#[test]
fn empty_tree_and_missing_root() {
    let dir = tempfile::tempdir().unwrap();
    let m = scan_dataset(dir.path()).unwrap();
    assert!(m.records.is_empty());
    assert!(matches!(
        scan_dataset(dir.path().join("nope")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn undecodable_files_become_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("benign/40X/p1");
    fs::create_dir_all(&p).unwrap();
    write_pnm(p.join("a.pgm"), &Image::filled(4, 4, 1, 9).unwrap()).unwrap();
    fs::write(p.join("b.pgm"), b"not an image").unwrap();
    let m = scan_dataset(dir.path()).unwrap();
    assert_eq!(m.records.len(), 1);
    assert_eq!(m.warnings.len(), 1);
    assert!(m.warnings[0].contains("b.pgm"));
}

#[test]
fn manifest_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(dir.path(), 3, (16, 16), 1).unwrap();
    let m = split_stratified(
        &scan_dataset(dir.path()).unwrap(),
        &SplitConfig {
            fractions: (0.34, 0.33, 0.33),
            ..SplitConfig::default()
        },
    )
    .unwrap();
    let path = dir.path().join("manifest.csv");
    write_manifest(&path, &m).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# {"));
    assert_eq!(
        text.lines().nth(1).unwrap(),
        "path,label,magnification,patient_id,split"
    );
    assert_eq!(read_manifest(&path).unwrap(), m);

    let tampered = text.replacen(",0,40X,", ",2,40X,", 1);
    fs::write(&path, tampered).unwrap();
    assert!(matches!(read_manifest(&path), Err(Error::Data(_))));
}

fn synthetic_manifest(per_stratum: usize) -> Manifest {
    let mut records = Vec::new();
    for label in Label::ALL {
        for mag in Magnification::ALL {
            for i in 0..per_stratum {
                records.push(SampleRecord {
                    path: format!("{label}/{mag}/{i}/{i}.pgm"),
                    label,
                    magnification: mag,
                    patient_id: format!("{label}-{i}"),
                    split: None,
                });
            }
        }
    }
    Manifest {
        root: "unused".into(),
        records,
        fingerprint: String::new(),
        warnings: vec![],
    }
}

#[test]
fn stratum_counts_within_one_of_proportion() {
    let fractions = [0.7, 0.15, 0.15];
    for (per_stratum, by_patient, seed) in [
        (100, false, 0),
        (100, true, 1),
        (13, false, 2),
        (57, true, 3),
    ] {
        let m = split_stratified(
            &synthetic_manifest(per_stratum),
            &SplitConfig {
                fractions: (0.7, 0.15, 0.15),
                by_patient,
                seed,
            },
        )
        .unwrap();
        let mut counts: BTreeMap<(Label, Magnification, Split), usize> = BTreeMap::new();
        for r in &m.records {
            *counts
                .entry((r.label, r.magnification, r.split.unwrap()))
                .or_default() += 1;
        }
        for label in Label::ALL {
            for mag in Magnification::ALL {
                for (s, f) in Split::ALL.iter().zip(fractions) {
                    let got = counts.get(&(label, mag, *s)).copied().unwrap_or(0) as f64;
                    let exact = f * per_stratum as f64;
                    assert!(
                        (got - exact).abs() <= 1.0,
                        "{label}/{mag}/{s}: {got} vs {exact}"
                    );
                }
            }
        }
    }
}

#[test]
fn batches_cover_selection_once() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(dir.path(), 5, (20, 20), 2).unwrap();
    let m = split_stratified(
        &scan_dataset(dir.path()).unwrap(),
        &SplitConfig {
            fractions: (1.0, 0.0, 0.0),
            ..SplitConfig::default()
        },
    )
    .unwrap();
    let cfg = PreprocessConfig {
        pad: 0,
        clahe_tiles: (2, 2),
        target_size: (16, 16),
        ..PreprocessConfig::default()
    };
    let a = batches(&m, Split::Train, None, 7, 3, &cfg, 3).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a.last().unwrap().labels.len(), 40 - 35);
    assert_eq!(a[0].x.shape(), &[7, 3, 16, 16]);
    let mut seen: Vec<usize> = a.iter().flat_map(|b| b.indices.clone()).collect();
    seen.sort();
    assert_eq!(seen, (0..40).collect::<Vec<_>>());

    // Multiset of labels matches the manifest.
    let mut got: HashMap<u8, usize> = HashMap::new();
    for b in &a {
        for &l in b.labels.data() {
            *got.entry(l as u8).or_default() += 1;
        }
    }
    assert_eq!(got[&0], 20);
    assert_eq!(got[&1], 20);

    assert_eq!(batches(&m, Split::Train, None, 7, 3, &cfg, 3).unwrap(), a);
    let whole = batches(&m, Split::Train, Some(Magnification::X200), 100, 3, &cfg, 3).unwrap();
    assert_eq!(whole.len(), 1);
    assert_eq!(whole[0].labels.len(), 10);
    assert!(matches!(
        batches(&m, Split::Val, None, 4, 0, &cfg, 3),
        Err(Error::Data(_))
    ));

    let set = load_selection(&m, Some(Split::Train), None, &cfg, 1).unwrap();
    assert_eq!(set.len(), 40);
}
