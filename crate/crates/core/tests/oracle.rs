use proptest::prelude::*;
use threesided::bucketed::BucketedPst;
use threesided::iosim::{ExtParams, ExtWbTree};
use threesided::mpst::{LayeredMpst, Mpst};
use threesided::pst::Pst;
use threesided::solution3::Solution3;
use threesided::wbpst::{WbParams, WbPst};
use threesided::{brute_force_query, Point, Query3, ThreeSided};

#[derive(Clone, Debug)]
enum Op {
    Insert(f64, f64),
    Delete(usize),
    Query(f64, f64, f64),
}

/// Coordinates on a coarse grid so ties in x and y are common.
fn coord() -> impl Strategy<Value = f64> {
    (0u8..24).prop_map(|v| v as f64 / 4.0)
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (coord(), coord()).prop_map(|(x, y)| Op::Insert(x, y)),
        2 => any::<usize>().prop_map(Op::Delete),
        2 => (coord(), 0.0..3.0f64, coord()).prop_map(|(a, w, c)| Op::Query(a, a + w, c)),
    ]
}

fn structures(initial: &[Point]) -> Vec<(&'static str, Box<dyn ThreeSided>)> {
    vec![
        ("pst", Box::new(Pst::from_points(initial).unwrap())),
        ("bucketed", Box::new(BucketedPst::build(initial).unwrap())),
        ("wbpst", Box::new(WbPst::build(initial, WbParams::test()).unwrap())),
        ("solution3", Box::new(Solution3::build(initial).unwrap())),
        (
            "ext",
            Box::new(ExtWbTree::build(initial, ExtParams::with_block(4).unwrap()).unwrap()),
        ),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dynamic_structures_agree_with_brute_force(
        initial in prop::collection::vec((coord(), coord()), 0..60),
        ops in prop::collection::vec(op(), 0..150),
    ) {
        let mut live: Vec<Point> = initial
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Point::new(i as u64, x, y).unwrap())
            .collect();
        let mut all = structures(&live);
        let mut next = live.len() as u64;
        for op in ops {
            match op {
                Op::Insert(x, y) => {
                    let p = Point::new(next, x, y).unwrap();
                    next += 1;
                    live.push(p);
                    for (_, s) in all.iter_mut() {
                        s.insert(p).unwrap();
                    }
                }
                Op::Delete(i) if !live.is_empty() => {
                    let p = live.swap_remove(i % live.len());
                    for (_, s) in all.iter_mut() {
                        prop_assert_eq!(s.delete(p.id).unwrap(), p);
                    }
                }
                Op::Delete(_) => {}
                Op::Query(a, b, c) => {
                    let q = Query3::new(a, b, c).unwrap();
                    let want = brute_force_query(&live, &q);
                    for (name, s) in &all {
                        prop_assert_eq!(&s.query(&q), &want, "{}", name);
                    }
                }
            }
        }
        for (name, s) in &all {
            prop_assert_eq!(s.len(), live.len(), "{}", name);
            if let Err(e) = s.audit() {
                prop_assert!(false, "{}: {}", name, e);
            }
        }
    }

    #[test]
    fn static_trees_agree_with_brute_force(
        pts in prop::collection::vec((coord(), coord()), 0..200),
        qs in prop::collection::vec((coord(), 0.0..4.0f64, coord()), 1..30),
    ) {
        let pts: Vec<Point> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Point::new(i as u64, x, y).unwrap())
            .collect();
        let flat = Mpst::build(&pts).unwrap();
        let layered = LayeredMpst::build(&pts).unwrap();
        let (fx, lx) = (flat.leaf_index(), layered.leaf_index());
        for (a, w, c) in qs {
            let q = Query3::new(a, a + w, c).unwrap();
            let want = brute_force_query(&pts, &q);
            prop_assert_eq!(&flat.query(&q), &want);
            prop_assert_eq!(&flat.query_full(&q, &fx), &want);
            prop_assert_eq!(&layered.query_full(&q, &lx), &want);
        }
    }
}

#[test]
fn errors_are_reported_uniformly() {
    let p = Point::new(1, 0.5, 0.5).unwrap();
    for (name, mut s) in structures(&[p]) {
        assert!(s.insert(p).is_err(), "{name}");
        assert!(s.delete(99).is_err(), "{name}");
        assert_eq!(s.len(), 1, "{name}");
        s.audit().unwrap();
    }
    assert!(Query3::new(1.0, 0.0, 0.0).is_err());
    assert!(Point::new(2, f64::NAN, 0.0).is_err());
}
