use flashlab::workload::{
    load_profile, Distribution, FileType, FileTypeWeight, ProfileError, WorkloadProfile, WriterProfile,
    ANDROID_LIKE_PROFILE,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn positive_dist() -> impl Strategy<Value = Distribution> {
    prop_oneof![
        (0.5f64..1e6).prop_map(Distribution::Constant),
        (0.5f64..1e3, 0.0f64..1e3).prop_map(|(low, w)| Distribution::Uniform { low, high: low + w }),
        (0.5f64..1e6).prop_map(|mean| Distribution::Exponential { mean }),
        prop::collection::vec((0.5f64..1e4, 0.1f64..10.0), 1..5).prop_map(Distribution::Empirical),
    ]
}

fn location_dist() -> impl Strategy<Value = Distribution> {
    prop_oneof![
        (0.0f64..2.0).prop_map(Distribution::Constant),
        (0.0f64..1.0, 0.0f64..1.0).prop_map(|(low, w)| Distribution::Uniform { low, high: low + w }),
        prop::collection::vec((0.0f64..1.0, 0.1f64..5.0), 1..5).prop_map(Distribution::Empirical),
    ]
}

fn file_type(i: usize) -> impl Strategy<Value = FileType> {
    (prop::option::of(positive_dist()), positive_dist(), positive_dist(), location_dist()).prop_map(
        move |(lifetime_dist, open_period_dist, chunks_per_open_dist, write_location_dist)| FileType {
            name: format!("type-{i}"),
            lifetime_dist,
            open_period_dist,
            chunks_per_open_dist,
            write_location_dist,
        },
    )
}

fn profile() -> impl Strategy<Value = WorkloadProfile> {
    (1usize..4, 1usize..4)
        .prop_flat_map(|(n_types, n_writers)| {
            let types: Vec<_> = (0..n_types).map(file_type).collect();
            let writers = prop::collection::vec((positive_dist(), 0..n_types), n_writers);
            (types, writers, "[a-z ]{0,20}")
        })
        .prop_map(|(file_types, ws, description)| WorkloadProfile {
            name: "generated".into(),
            description,
            writers: ws
                .into_iter()
                .enumerate()
                .map(|(i, (inter_creation_time_dist, t))| WriterProfile {
                    name: format!("writer-{i}"),
                    inter_creation_time_dist,
                    file_type_dist: vec![FileTypeWeight { file_type: file_types[t].name.clone(), weight: 1.0 }],
                })
                .collect(),
            file_types,
        })
}

proptest! {
    #[test]
    fn canonical_form_round_trips(p in profile()) {
        let text = p.to_canonical();
        let back = load_profile(&text).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.to_canonical(), text);
    }

    #[test]
    fn samples_stay_in_support(d in positive_dist(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let x = d.sample(&mut rng);
            let ok = match &d {
                Distribution::Constant(v) => x == *v,
                Distribution::Uniform { low, high } => *low <= x && x <= *high,
                Distribution::Exponential { .. } => x >= 0.0,
                Distribution::Empirical(pts) => pts.iter().any(|(v, _)| *v == x),
            };
            prop_assert!(ok, "{x} outside {d:?}");
            prop_assert!(d.sample_ticks(&mut rng) >= 1);
        }
    }
}

#[test]
fn bundled_profile_loads_and_round_trips() {
    let p = load_profile(ANDROID_LIKE_PROFILE).unwrap();
    assert_eq!(p.writers.len(), 4);
    assert_eq!(load_profile(&p.to_canonical()).unwrap(), p);
}

#[test]
fn weights_must_sum_to_one() {
    let text = ANDROID_LIKE_PROFILE.replacen("weight = 1.0", "weight = 0.7", 1);
    assert!(matches!(load_profile(&text), Err(ProfileError::Parse(m)) if m.contains("sum to")));
}

#[test]
fn unknown_distribution_is_named() {
    let text = ANDROID_LIKE_PROFILE.replacen("\"exponential\"", "\"pareto\"", 1);
    assert_eq!(load_profile(&text), Err(ProfileError::UnknownDistribution("pareto".into())));
}

#[test]
fn zero_inter_creation_time_is_rejected() {
    let text = r#"
name = "bad"
[[file_type]]
name = "f"
open_period_dist = { kind = "constant", value = 10.0 }
chunks_per_open_dist = { kind = "constant", value = 1.0 }
write_location_dist = { kind = "constant", value = 1.0 }
[[writer]]
name = "w"
inter_creation_time_dist = { kind = "constant", value = 0.0 }
file_type_dist = [{ file_type = "f", weight = 1.0 }]
"#;
    assert!(matches!(load_profile(text), Err(ProfileError::Parse(m)) if m.contains("strictly positive")));
}
