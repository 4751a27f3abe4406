use std::collections::BTreeMap;

use camtrap_core::ingest::{Dataset, DetectionSet, ImageRecord, LabelSpace};
use camtrap_core::tuning::{
    make_split, make_station_partition, split_ids, Split, DEFAULT_FRACTIONS,
};
use camtrap_core::Error;
use proptest::prelude::*;

fn dataset(stations: &[(usize, usize)]) -> Dataset {
    let space = LabelSpace::new(["empty", "fox"]).unwrap();
    let mut images = Vec::new();
    for &(s, n) in stations {
        for i in 0..n {
            images.push(ImageRecord {
                image_id: format!("s{s:02}-{i:03}"),
                station_id: format!("s{s:02}"),
                file_path: None,
                label: Some(if i % 3 == 0 { "fox" } else { "empty" }.into()),
                capture_time: None,
            });
        }
    }
    let sets = images
        .iter()
        .map(|r| DetectionSet::empty(&r.image_id))
        .collect();
    Dataset::new(space, images, sets).unwrap()
}

#[test]
fn one_station_of_100() {
    let split = make_split(&dataset(&[(0, 100)]), DEFAULT_FRACTIONS, true, 1).unwrap();
    assert_eq!(split.sizes(), [70, 15, 15]);
}

#[test]
fn two_stations_of_10() {
    let ds = dataset(&[(0, 10), (1, 10)]);
    let split = make_split(&ds, DEFAULT_FRACTIONS, true, 4).unwrap();
    assert_eq!(split.sizes(), [14, 3, 3]);
    for station in ["s00", "s01"] {
        let train = split
            .ids(Split::Train)
            .iter()
            .filter(|id| id.starts_with(station))
            .count();
        assert_eq!(train, 7);
    }
}

#[test]
fn rejects_fractions_not_summing_to_one() {
    assert!(matches!(
        make_split(&dataset(&[(0, 10)]), [0.5, 0.5, 0.2], true, 0),
        Err(Error::InvalidFractions(_))
    ));
}

#[test]
fn station_partition_floor() {
    let stations: Vec<(usize, usize)> = (0..37).map(|s| (s, 2)).collect();
    let ds = dataset(&stations);
    let (inside, outside) = make_station_partition(&ds, 0.5, 3).unwrap();
    assert_eq!((inside.len(), outside.len()), (18, 19));
    assert!(inside.iter().all(|s| !outside.contains(s)));
    assert_eq!(make_station_partition(&ds, 0.5, 3).unwrap().0, inside);
    assert!(matches!(
        make_station_partition(&dataset(&[(0, 5)]), 0.5, 0),
        Err(Error::TooFewStations(1))
    ));
    // At least one station on each side.
    let (i, o) = make_station_partition(&ds, 0.0, 1).unwrap();
    assert_eq!((i.len(), o.len()), (1, 36));
}

proptest! {
    #[test]
    fn split_is_a_partition(
        sizes in prop::collection::vec(1usize..30, 1..6),
        train in 0.0f64..1.0,
        seed in 0u64..100,
        stratify: bool,
    ) {
        let val = (1.0 - train) / 2.0;
        let fractions = [train, val, 1.0 - train - val];
        let items: Vec<(String, String)> = sizes
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| (0..n).map(move |i| (format!("{s}-{i}"), format!("st{s}"))))
            .collect();
        let split = split_ids(&items, fractions, stratify, seed).unwrap();
        prop_assert_eq!(split.assignments.len(), items.len());
        let sizes_out = split.sizes();
        prop_assert_eq!(sizes_out.iter().sum::<usize>(), items.len());
        for (k, &f) in fractions.iter().enumerate() {
            // Largest remainder never strays a full image per station from the exact share.
            let slack = if stratify { sizes.len() as f64 } else { 1.0 };
            prop_assert!((sizes_out[k] as f64 - f * items.len() as f64).abs() < slack + 1e-9);
        }
        if stratify {
            let mut per_station: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
            for (id, station) in &items {
                let part = split.assignments[id];
                per_station.entry(station).or_default()[Split::ALL.iter().position(|p| *p == part).unwrap()] += 1;
            }
            for (station, counts) in per_station {
                let n: usize = counts.iter().sum();
                for k in 0..3 {
                    prop_assert!((counts[k] as f64 - fractions[k] * n as f64).abs() < 1.0 + 1e-9, "{}", station);
                }
            }
        }
        prop_assert_eq!(split_ids(&items, fractions, stratify, seed).unwrap(), split);
    }
}
