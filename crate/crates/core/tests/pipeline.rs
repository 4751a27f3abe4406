use camtrap_core::imaging::crop_id;
use camtrap_core::ingest::{Dataset, DetectionSet, DetectorCategory};
use camtrap_core::merge::{merge_image, PipelineConfig};
use camtrap_core::pipeline::{Lambda, PipelineDeps, StoreMap};
use camtrap_core::synth::{generate_synthetic_project, SynthSpec, SyntheticProject};
use proptest::prelude::*;

fn project(n: usize, seed: u64) -> (SyntheticProject, Dataset, StoreMap) {
    let spec = SynthSpec {
        n_images: n,
        n_stations: 4,
        ..SynthSpec::default()
    };
    let synth = generate_synthetic_project(&spec, seed).unwrap();
    let ds = synth.fully_labeled();
    let stores = synth
        .stores
        .iter()
        .map(|s| (s.provider().name.clone(), s.clone()))
        .collect();
    (synth, ds, stores)
}

fn first_max(v: &[f64]) -> usize {
    (1..v.len()).fold(0, |best, k| if v[k] > v[best] { k } else { best })
}

#[test]
fn dataset_predictions_match_reference() {
    let (synth, ds, stores) = project(500, 2);
    let deps = PipelineDeps::new(&ds, &stores);
    let lambda = Lambda::new(synth.stores[0].provider().clone(), 0.3);
    let ids = ds.labeled_ids();
    let (head, _) = deps
        .train(&ids[..250], &synth.truth, &lambda, None)
        .unwrap();
    let predictions = deps.predict(&head, &ids, &lambda).unwrap();
    assert_eq!(predictions.len(), 500);
    let store = &synth.stores[0];
    let space = ds.label_space();
    let empty = space.empty_index();
    for p in &predictions {
        let dets = &ds.detections(&p.image_id).unwrap().detections;
        let boxes: Vec<(f64, Vec<f64>)> = dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.category == DetectorCategory::Animal && d.confidence >= 0.3)
            .map(|(b, d)| {
                (
                    d.confidence,
                    head.scores(store.get(&crop_id(&p.image_id, b, 0)).unwrap())
                        .unwrap(),
                )
            })
            .collect();
        if boxes.is_empty() {
            assert_eq!(p.label, "empty");
            assert_eq!(p.confidence, 1.0);
            continue;
        }
        let total: f64 = boxes.iter().map(|b| b.0).sum();
        let scores: Vec<f64> = (0..space.len())
            .map(|k| boxes.iter().map(|(c, s)| c * s[k]).sum::<f64>() / total)
            .collect();
        for (a, b) in p.scores.iter().zip(&scores) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(p.label, space.name(first_max(&scores)));
        let mut counts = vec![0u32; space.len()];
        for (_, s) in &boxes {
            let k = first_max(s);
            if k != empty {
                counts[k] += 1;
            }
        }
        assert_eq!(p.counts, counts);
    }
}

#[test]
fn no_boxes_means_empty_and_full_beta_abstains() {
    let (synth, ds, stores) = project(120, 5);
    let lambda = Lambda::new(synth.stores[0].provider().clone(), 0.5);
    let ids = ds.labeled_ids();
    let (head, _) = PipelineDeps::new(&ds, &stores)
        .train(&ids, &synth.truth, &lambda, None)
        .unwrap();

    let bare: Vec<DetectionSet> = ds
        .detection_sets()
        .iter()
        .map(|s| DetectionSet::empty(&s.image_id))
        .collect();
    let no_boxes = Dataset::new(ds.label_space().clone(), ds.images().to_vec(), bare).unwrap();
    let preds = PipelineDeps::new(&no_boxes, &stores)
        .predict(&head, &ids, &lambda)
        .unwrap();
    assert!(preds.iter().all(|p| p.label == "empty" && !p.abstained));

    let mut deps = PipelineDeps::new(&ds, &stores);
    deps.beta = 1.0;
    for p in deps.predict(&head, &ids, &lambda).unwrap() {
        let has_box = ds.detections(&p.image_id).unwrap().has_high_conf(0.5);
        assert_eq!(p.abstained, has_box, "{}", p.image_id);
    }
}

#[test]
fn evaluation_reports_both_levels() {
    let (synth, ds, stores) = project(300, 9);
    let deps = PipelineDeps::new(&ds, &stores);
    let lambda = Lambda::new(synth.stores[0].provider().clone(), 0.5);
    let ids = ds.labeled_ids();
    let (train, test) = ids.split_at(200);
    let (head, _) = deps.train(train, &synth.truth, &lambda, None).unwrap();
    let ev = deps.evaluate(&head, test, &synth.truth, &lambda).unwrap();
    assert_eq!(ev.image.total, 100);
    assert_eq!(ev.coverage, 1.0);
    let bb = ev.bb.unwrap();
    assert!(bb.total > 0);
    assert!(ev.image.accuracy > 0.6, "{}", ev.image.accuracy);
}

fn score_vec(g: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, g).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn merged_scores_stay_in_the_hull(
        boxes in prop::collection::vec((0.05f64..1.0, score_vec(4)), 1..6)
    ) {
        use camtrap_core::ingest::{BBox, Detection, LabelSpace};
        use camtrap_core::embedding::EmbedderId;
        let space = LabelSpace::new(["fox", "deer", "empty", "boar"]).unwrap();
        let ds = DetectionSet {
            image_id: "x".into(),
            detections: boxes.iter().map(|(c, _)| Detection::animal(BBox::new(0.0, 0.0, 0.5, 0.5), *c)).collect(),
        };
        let cfg = PipelineConfig::new(0.0, EmbedderId::new("e", 1));
        let p = merge_image(&ds, &boxes, &space, &cfg).unwrap();
        prop_assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for k in 0..4 {
            let lo = boxes.iter().map(|b| b.1[k]).fold(f64::INFINITY, f64::min);
            let hi = boxes.iter().map(|b| b.1[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p.scores[k] >= lo - 1e-12 && p.scores[k] <= hi + 1e-12);
        }
        prop_assert!(p.counts.iter().sum::<u32>() as usize <= boxes.len());
        prop_assert_eq!(p.counts[2], 0);

        let mut reversed = boxes.clone();
        reversed.reverse();
        let ds_rev = DetectionSet { image_id: "x".into(), detections: ds.detections.iter().rev().cloned().collect() };
        let q = merge_image(&ds_rev, &reversed, &space, &cfg).unwrap();
        for (a, b) in p.scores.iter().zip(&q.scores) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert_eq!(&p.counts, &q.counts);
    }
}
