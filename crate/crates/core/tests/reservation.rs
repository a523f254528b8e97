use proptest::prelude::*;
use qbridge_core::reservation::{Ledger, ReserveError, Window};

#[derive(Debug, Clone)]
enum Op {
    Reserve { res: u8, start: u64, len: u64 },
    Truncate { pick: usize, at: u64 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0u8..3, 0u64..200, 0u64..30).prop_map(|(res, start, len)| Op::Reserve { res, start, len }),
        1 => (any::<usize>(), 0u64..250).prop_map(|(pick, at)| Op::Truncate { pick, at }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Granted windows on one resource never overlap, denials point at a
    /// start that really is free, and truncation never lengthens a grant.
    #[test]
    fn grants_stay_disjoint(ops in prop::collection::vec(op(), 1..80)) {
        let mut ledger = Ledger::new();
        let mut ids = Vec::new();
        for o in ops {
            match o {
                Op::Reserve { res, start, len } => {
                    let name = format!("r{res}");
                    match ledger.reserve(&name, start, len, 7) {
                        Ok(g) => {
                            prop_assert_eq!(g.window, Window::new(start, len));
                            ids.push(g.id);
                        }
                        Err(ReserveError::ZeroDuration) => prop_assert_eq!(len, 0),
                        Err(ReserveError::Denied { earliest_start }) => {
                            prop_assert!(earliest_start > start);
                            let probe = Window::new(earliest_start, len);
                            prop_assert!(ledger.grants(&name).iter().all(|g| !g.window.overlaps(&probe)));
                        }
                        Err(e) => prop_assert!(false, "unexpected {e:?}"),
                    }
                }
                Op::Truncate { pick, at } => {
                    if ids.is_empty() {
                        continue;
                    }
                    let id = ids[pick % ids.len()];
                    let before = ledger.get(id).map(|g| g.window);
                    prop_assert!(ledger.truncate(id, at).is_ok() || before.is_none());
                    if let (Some(b), Some(after)) = (before, ledger.get(id).map(|g| g.window)) {
                        prop_assert!(after.start == b.start && after.end <= b.end && after.end > after.start);
                    }
                }
            }
            for res in 0..3 {
                let gs = ledger.grants(&format!("r{res}"));
                for (i, a) in gs.iter().enumerate() {
                    for b in &gs[i + 1..] {
                        prop_assert!(!a.window.overlaps(&b.window), "{:?} and {:?}", a, b);
                    }
                }
            }
        }
    }
}
