use proptest::prelude::*;

use segpoint::data::standard_vocabulary;
use segpoint::geometry::{farthest_point_sample, knn, squared_distance};
use segpoint::metrics::iou;
use segpoint::optim::warmup_decay_lr;
use segpoint::tasks::{parse_answer_labels, render_answer};
use segpoint::{Point3, TaskKind};

fn cloud(max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(prop::array::uniform3(-4i32..4), 1..max)
        .prop_map(|v| v.into_iter().map(|p| p.map(|c| c as f64 * 0.5)).collect())
}

proptest! {
    #[test]
    fn knn_rows_are_sorted_and_distinct(refs in cloud(40), queries in cloud(6), k in 1usize..8) {
        let k = k.min(refs.len());
        let nb = knn(&queries, &refs, k).unwrap();
        for (q, query) in queries.iter().enumerate() {
            let row = nb.row(q);
            let mut seen = row.to_vec();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), k);
            for w in row.windows(2) {
                let (a, b) = (squared_distance(query, &refs[w[0]]), squared_distance(query, &refs[w[1]]));
                prop_assert!(a < b || (a == b && w[0] < w[1]));
            }
            let worst = squared_distance(query, &refs[row[k - 1]]);
            for (j, r) in refs.iter().enumerate() {
                if !row.contains(&j) {
                    let d = squared_distance(query, r);
                    prop_assert!(d > worst || (d == worst && j > row[k - 1]));
                }
            }
        }
    }

    #[test]
    fn fps_picks_are_distinct_and_spread(points in cloud(40), frac in 0.0f64..1.0) {
        let m = 1 + ((points.len() - 1) as f64 * frac) as usize;
        let s = farthest_point_sample(&points, m, 0).unwrap();
        prop_assert_eq!(s.indices[0], 0);
        let mut seen = s.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), m);
        // Coverage radius never grows as points are added.
        let mut last = f64::INFINITY;
        for t in 1..m {
            let p = &points[s.indices[t]];
            let d = s.indices[..t].iter().map(|&i| squared_distance(p, &points[i])).fold(f64::INFINITY, f64::min);
            prop_assert!(d <= last);
            last = d;
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(pairs in prop::collection::vec(any::<(bool, bool)>(), 1..64)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let x = iou(&a, &b).unwrap();
        prop_assert_eq!(x, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn answers_parse_back_to_their_labels(picks in prop::collection::btree_set(0usize..20, 1..6)) {
        let vocab = standard_vocabulary();
        let names: Vec<String> = picks
            .into_iter()
            .map(|i| segpoint::data::LEXICON[i].name.to_string())
            .collect();
        let answer = render_answer(TaskKind::SemanticAll, &names, false).unwrap();
        let ids = vocab.tokenize(&answer);
        prop_assert_eq!(vocab.detokenize(&ids), answer);
        let mut sorted = names.clone();
        sorted.sort();
        prop_assert_eq!(parse_answer_labels(&ids, &vocab), sorted);
    }

    #[test]
    fn schedule_stays_within_bounds(step in 1usize..3000, warmup in 0usize..200, total in 1usize..3000) {
        let lr = warmup_decay_lr(1e-3, step, warmup, total);
        prop_assert!((0.0..=1e-3).contains(&lr));
    }
}
