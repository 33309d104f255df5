use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use survey_audit::alignment::ReferenceTable;
use survey_audit::bias::sample_index;
use survey_audit::discriminator::{
    discriminator_test, subgroup_vs_rest_baseline, DiscriminatorOptions, Gbdt, GbdtParams,
};

fn table(p: &[f64], n: usize, seed: u64, group: Option<&str>) -> ReferenceTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            vec![format!("{}", sample_index(p, u)), format!("{}", sample_index(&[0.6, 0.4], v))]
        })
        .collect();
    ReferenceTable::new(
        vec!["X".into(), "Y".into()],
        rows,
        None,
        group.map(|g| vec![g.to_string(); n]),
    )
    .unwrap()
}

fn tv(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0
}

/// `X` shifted by `d` mass from the first to the last category.
fn shifted(d: f64) -> (Vec<f64>, Vec<f64>) {
    let base = vec![0.25, 0.25, 0.25, 0.25];
    let p = vec![0.25 + d / 2.0, 0.25 + d / 2.0, 0.25 - d / 2.0, 0.25 - d / 2.0];
    (base, p)
}

#[test]
fn accuracy_tracks_total_variation() {
    let clf = Gbdt::new(GbdtParams { trees: 60, ..Default::default() });
    let mut last = 0.0;
    for (i, d) in [0.0, 0.1, 0.2, 0.3, 0.4].iter().enumerate() {
        let (p, q) = shifted(*d);
        let analytic = tv(&p, &q);
        let a = table(&p, 6000, 10 + i as u64, None);
        let b = table(&q, 6000, 20 + i as u64, None);
        let opts = DiscriminatorOptions { n: 6000, seeds: 4, seed: 1, test_fraction: 0.2 };
        let r = discriminator_test(&a, &b, &clf, &opts).unwrap();
        let bayes = (1.0 + analytic) / 2.0;
        assert!(r.mean_accuracy <= bayes + 0.03, "d={d}: {} above {bayes}", r.mean_accuracy);
        assert!(r.mean_accuracy >= last - 0.02, "d={d}: {} after {last}", r.mean_accuracy);
        assert!(r.seeds.iter().all(|s| (0.0..=1.0).contains(&s.accuracy)));
        last = r.mean_accuracy;
    }
}

#[test]
fn graded_subgroups_match_bayes_rates() {
    // Subgroup "a" is the base; "b" and "c" differ from "a" by TV 0.1 and 0.3.
    // Each subgroup is then compared with the union of the other two, so the
    // analytic rates come from the mixtures.
    let (base, _) = shifted(0.0);
    let (_, p1) = shifted(0.1);
    let (_, p3) = shifted(0.3);
    let n = 8000;
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for (g, p, seed) in [("a", &base, 1u64), ("b", &p1, 2), ("c", &p3, 3)] {
        let t = table(p, n, seed, Some(g));
        rows.extend(t.rows().iter().cloned());
        groups.extend(std::iter::repeat(g.to_string()).take(n));
    }
    let all = ReferenceTable::new(vec!["X".into(), "Y".into()], rows, None, Some(groups)).unwrap();
    let opts = DiscriminatorOptions { seeds: 4, seed: 0, ..Default::default() };
    let clf = Gbdt::new(GbdtParams { trees: 60, ..Default::default() });
    let result = subgroup_vs_rest_baseline(&all, &clf, Some(n / 2), &opts).unwrap();
    let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a + b) / 2.0).collect::<Vec<_>>();
    let expected = [
        (1.0 + tv(&base, &mix(&p1, &p3))) / 2.0,
        (1.0 + tv(&p1, &mix(&base, &p3))) / 2.0,
        (1.0 + tv(&p3, &mix(&base, &p1))) / 2.0,
    ];
    for (r, e) in result.iter().zip(expected) {
        assert!((r.mean_accuracy - e).abs() <= 0.03, "{}: {} vs {e}", r.subgroup, r.mean_accuracy);
    }
}

#[test]
fn pairwise_graded_tv_against_base() {
    // Direct pairs with analytic TV 0.1 and 0.3.
    let clf = Gbdt::new(GbdtParams { trees: 60, ..Default::default() });
    for (d, target) in [(0.1, 0.55), (0.3, 0.65)] {
        let (base, p) = shifted(d);
        assert!((tv(&base, &p) - d).abs() < 1e-12);
        let a = table(&base, 10_000, 41, None);
        let b = table(&p, 10_000, 42, None);
        let opts = DiscriminatorOptions { n: 10_000, seeds: 4, seed: 3, test_fraction: 0.2 };
        let r = discriminator_test(&a, &b, &clf, &opts).unwrap();
        assert!((r.mean_accuracy - target).abs() <= 0.03, "TV {d}: {}", r.mean_accuracy);
    }
}
