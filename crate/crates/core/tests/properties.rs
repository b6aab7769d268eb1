//! Property tests for the geometric and combinatorial invariants.

use ppstat::geometry::{convex_hull, ripley_rasson_window, Point2, Window};
use ppstat::pattern::{restrict, MultitypePattern, Selector};
use proptest::prelude::*;

fn arb_points(min: usize, max: usize) -> impl Strategy<Value = Vec<Point2>> {
    prop::collection::vec((0.0..10.0f64, 0.0..10.0f64), min..max)
        .prop_map(|v| v.into_iter().map(|(x, y)| Point2::new(x, y)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ripley_rasson_contains_every_input_point(pts in arb_points(6, 60)) {
        let hull = convex_hull(&pts);
        prop_assume!(hull.len() >= 3 && pts.len() > hull.len());
        let window = ripley_rasson_window(&pts).unwrap();
        for p in &pts {
            prop_assert!(window.contains(*p), "({}, {}) escaped the window", p.x, p.y);
        }
        prop_assert!(window.area() > 0.0);
    }

    #[test]
    fn erosion_is_monotone_on_rectangles(
        w in 1.0..8.0f64,
        h in 1.0..8.0f64,
        r1 in 0.01..0.4f64,
        extra in 0.01..0.4f64,
    ) {
        let window = Window::rectangle(0.0, 0.0, w, h).unwrap();
        let r2 = r1 + extra;
        let e1 = window.erode(r1).unwrap();
        prop_assert!((e1.area() - (w - 2.0 * r1) * (h - 2.0 * r1)).abs() < 1e-9);
        match window.erode(r2) {
            Ok(e2) => {
                prop_assert!(e2.area() <= e1.area() + 1e-12);
                for v in e2.vertices() {
                    prop_assert!(e1.contains(*v));
                }
            }
            Err(_) => {
                // erosion emptied the window: radius at least half the side
                prop_assert!(2.0 * r2 >= w.min(h) - 1e-9);
            }
        }
    }

    #[test]
    fn erosion_is_monotone_on_convex_hull_windows(pts in arb_points(8, 40)) {
        let hull = convex_hull(&pts);
        prop_assume!(hull.len() >= 3 && pts.len() > hull.len());
        let window = ripley_rasson_window(&pts).unwrap();
        let short = window.bbox().width().min(window.bbox().height());
        let r1 = short / 20.0;
        let r2 = short / 8.0;
        if let (Ok(e1), Ok(e2)) = (window.erode(r1), window.erode(r2)) {
            prop_assert!(e2.area() <= e1.area() + 1e-12);
            for v in e2.vertices() {
                prop_assert!(e1.contains(*v));
            }
        }
    }

    #[test]
    fn type_restrictions_partition_the_pattern(
        pts in arb_points(4, 80),
        seed in 0u32..1000,
    ) {
        let window = Window::rectangle(0.0, 0.0, 10.0, 10.0).unwrap();
        let labels: Vec<u32> = pts
            .iter()
            .enumerate()
            .map(|(i, _)| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed)) % 3)
            .collect();
        let pattern = MultitypePattern::new(
            "p",
            pts,
            vec!["a".into(), "b".into(), "c".into()],
            labels,
            window,
        )
        .unwrap();
        let total: usize = ["a", "b", "c"]
            .iter()
            .map(|t| restrict(&pattern, Selector::Type(t)).unwrap().n())
            .sum();
        prop_assert_eq!(total, pattern.n());
        let unmarked = restrict(&pattern, Selector::Unmarked).unwrap();
        prop_assert_eq!(unmarked.n(), pattern.n());
        prop_assert_eq!(unmarked.type_names().len(), 1);
    }

    #[test]
    fn pattern_json_round_trip_is_lossless(pts in arb_points(3, 40)) {
        let window = Window::rectangle(-1.0, -1.0, 11.0, 11.0).unwrap();
        let n = pts.len();
        let pattern = MultitypePattern::new(
            "p",
            pts,
            vec!["only".into()],
            vec![0; n],
            window,
        ).unwrap();
        let json = serde_json::to_string(&pattern).unwrap();
        let back: MultitypePattern = serde_json::from_str(&json).unwrap();
        for (a, b) in pattern.points().iter().zip(back.points()) {
            prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
    }
}
