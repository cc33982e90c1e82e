//! Every experiment kind end to end at a toy budget: the plumbing, row
//! layout and caching, not the thresholds.

use std::path::Path;

use stitchlab::report::{csv_string, write_outputs, CSV_HEADER};
use stitchlab::{run, Lab, Manifest};

fn manifest(id: &str, experiment: &str) -> Manifest {
    let text = format!(
        r#"
        id = "{id}"
        train_data = "synth:5:160"
        test_data = "synth:6:64"
        width = 0.25
        seed = 1

        [train]
        steps = 8
        batch_size = 32

        [stitch]
        steps = 4
        batch_size = 32
        init_batch = 64

        [experiment]
        {experiment}
        "#
    );
    Manifest::parse(&text, Path::new("inline.toml")).unwrap()
}

const KINDS: [(&str, &str); 10] = [
    (
        "connectivity",
        "kind = \"connectivity\"\nbottom_seed = 2\ndisjoint = true\nself_stitch = true\nrandom_seed = 3",
    ),
    ("random_sanity", "kind = \"random_sanity\"\nrandom_seed = 3\nreference_seed = 2\ncka_examples = 32"),
    (
        "more_data",
        "kind = \"more_data\"\ntop_samples = 64\nbottom_seed = 2\nsample_sizes = [32, 64, 128]",
    ),
    ("more_time", "kind = \"more_time\"\ncheckpoints = [2, 4, 8]\ntop_checkpoint = 4"),
    (
        "more_width",
        "kind = \"more_width\"\nbottom_seed = 2\nwidths = [0.25, 0.5]\nasymmetry = [0.25, 0.5]",
    ),
    (
        "label_quality",
        "kind = \"label_quality\"\nbottom_seed = 2\ncoarse = true\nnoise = [0.5, 1.0]",
    ),
    ("kernel_ablation", "kind = \"kernel_ablation\"\nbottom_seed = 2\nkernels = [1, 3]"),
    (
        "finetune_baseline",
        "kind = \"finetune_baseline\"\nrandom_seed = 3\nbottom_seed = 2\nfinetune_cuts = [1]",
    ),
    ("freeze_training", "kind = \"freeze_training\"\nbottom_seed = 2\nsamples = 64\nselect_epsilon = 1.0"),
    (
        "cka_compare",
        "kind = \"cka_compare\"\nbottom_seed = 2\ncka_examples = 48\nspurious = 16",
    ),
];

#[test]
fn every_kind_runs_and_reruns_from_cache() {
    let cache = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let lab = Lab::new("synth:5:160", "synth:6:64", Some(cache.path())).unwrap();
    for (kind, body) in KINDS {
        let m = manifest(kind, body);
        let r = run(&m, &lab, 2).unwrap_or_else(|e| panic!("{kind}: {e}"));
        assert_eq!(r.kind, kind);
        assert!(!r.rows.is_empty() && !r.checks.is_empty(), "{kind}");
        assert!(r.rows.iter().all(|row| row.value.is_finite()), "{kind}");
        let mut sorted = r.rows.clone();
        sorted.sort_by(|a, b| {
            (&a.variant, a.cut, a.seed, &a.metric).cmp(&(&b.variant, b.cut, b.seed, &b.metric))
        });
        assert_eq!(sorted, r.rows, "{kind} rows are not in canonical order");
        write_outputs(&r, &out.path().join(kind)).unwrap();
        assert!(out.path().join(kind).join("chart.svg").exists(), "{kind}");

        // Everything is cached now: a second lab over the same directory
        // trains nothing and reproduces the rows exactly.
        let again = Lab::new("synth:5:160", "synth:6:64", Some(cache.path())).unwrap();
        let r2 = run(&m, &again, 1).unwrap();
        assert_eq!(again.trainings(), 0, "{kind} retrained");
        assert_eq!(csv_string(&r), csv_string(&r2), "{kind}");
    }
}

#[test]
fn kinds_report_what_they_promise() {
    let lab = Lab::new("synth:5:160", "synth:6:64", None).unwrap();
    let get = |kind: &str| {
        let (_, body) = KINDS.iter().find(|k| k.0 == kind).unwrap();
        run(&manifest(kind, body), &lab, 1).unwrap()
    };

    let c = get("connectivity");
    for v in ["two_seed", "disjoint", "self", "random"] {
        let cuts: Vec<usize> = c.series(v, "penalty").iter().map(|p| p.0).collect();
        assert_eq!(cuts, vec![0, 1, 2, 3, 4], "{v}");
        assert_eq!(
            c.value(v, Some(0), "penalty"),
            Some(0.0),
            "identity at cut 0"
        );
    }
    assert!(c.series("self", "penalty").iter().all(|p| p.1.abs() < 0.1));

    let l = get("label_quality");
    assert!(
        l.value("coarse", Some(1), "bottom_error").is_none(),
        "coarse bottoms have no comparable error"
    );
    assert!(l.value("noise=0.5", Some(1), "bottom_error").is_some());

    let k = get("cka_compare");
    for metric in ["cka_pair", "cka_pair_augmented", "cka_self_augmented"] {
        let v = k.value("spurious", Some(4), metric).unwrap();
        assert!((0.0..=1.0).contains(&v), "{metric} {v}");
    }
    assert_eq!(k.series("pool", "cka").len(), 5);
    assert_eq!(k.value("pool", Some(0), "cka"), Some(1.0));

    let f = get("freeze_training");
    let frozen = f.value("freeze", None, "frozen_blocks").unwrap() as usize;
    assert_eq!(frozen, 4, "with a loose epsilon every cut qualifies");
    assert!(f.value("freeze", Some(frozen), "error").is_some());
}

#[test]
fn csv_header_matches_the_contract() {
    let lab = Lab::new("synth:5:160", "synth:6:64", None).unwrap();
    let (_, body) = KINDS[6];
    let text = csv_string(&run(&manifest("k", body), &lab, 1).unwrap());
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    let digest = manifest("k", body).digest();
    assert!(text.lines().skip(1).all(|l| l.ends_with(&digest)));
}
