mod common;

use common::rng;
use diffrestore::dataio::{
    build_manifest, list_pngs, load_image, load_pairs, sample_patch, save_image, Split, SplitRatios,
};
use diffrestore::degrade::{synth_underwater, UnderwaterParams};
use diffrestore::{Domain, ImageTensor};
use rand::Rng;

fn random_unit(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::from_fn(3, h, w, Domain::Unit, |_, _, _| r.random_range(0..=255) as f64 / 255.0)
}

#[test]
fn manifest_pairs_by_name_and_reports_strays() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    let degraded = tmp.path().join("degraded");
    std::fs::create_dir_all(&clean).unwrap();
    std::fs::create_dir_all(&degraded).unwrap();
    for name in ["a.png", "b.png", "c.png"] {
        save_image(&random_unit(1, 4, 4), clean.join(name)).unwrap();
    }
    for name in ["a.png", "c.png", "extra.png"] {
        save_image(&random_unit(2, 4, 4), degraded.join(name)).unwrap();
    }
    std::fs::write(clean.join("notes.txt"), "ignored").unwrap();

    let m = build_manifest(&clean, &degraded, SplitRatios::all_train()).unwrap();
    let names: Vec<&str> = m.entries.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["a.png", "c.png"]);
    assert_eq!(m.unmatched.len(), 2);
    assert!(m.entries.iter().all(|e| e.split == Split::Train));
    assert_eq!(list_pngs(&clean).unwrap().len(), 3);

    let pairs = load_pairs(&m, None).unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!(pairs[0].clean, load_image(clean.join("a.png")).unwrap());
}

#[test]
fn split_assignment_is_stable_and_roughly_proportional() {
    let ratios = SplitRatios::default();
    let names: Vec<String> = (0..2000).map(|i| format!("img_{i:05}.png")).collect();
    let first: Vec<Split> = names.iter().map(|n| ratios.assign(n)).collect();
    let second: Vec<Split> = names.iter().map(|n| ratios.assign(n)).collect();
    assert_eq!(first, second);
    let train = first.iter().filter(|s| **s == Split::Train).count() as f64 / 2000.0;
    assert!((train - 0.8).abs() < 0.04, "train fraction {train}");
}

#[test]
fn png_round_trip_is_exact_on_byte_values() {
    let tmp = tempfile::tempdir().unwrap();
    let img = random_unit(3, 7, 5);
    let path = tmp.path().join("x.png");
    save_image(&img, &path).unwrap();
    assert_eq!(load_image(&path).unwrap(), img);
}

#[test]
fn sampled_patches_regenerate_from_clean_patches() {
    let p = UnderwaterParams::default();
    let clean = random_unit(4, 20, 17);
    let degraded = synth_underwater(&clean, &p).unwrap();
    let mut r = rng(5);
    for size in [4, 9, 17, 24] {
        let patch = sample_patch(&clean, &degraded, size, &mut r).unwrap();
        assert_eq!(patch.clean.shape(), [3, size, size]);
        assert_eq!(synth_underwater(&patch.clean, &p).unwrap(), patch.degraded);
    }
}
