mod common;

use std::collections::{BTreeMap, HashSet};
use std::thread;
use std::time::Duration;

use fairflow::runner::PreprocessingSpec;
use fairflow::seed;
use fairflow::{ImportOrder, OrderStatus, Services};
use rand::Rng;

fn run_workers(services: &Services, workers: usize, jitter: bool) -> Vec<Vec<String>> {
    thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let importer = services.importer.clone();
                scope.spawn(move || {
                    let mut rng = rand::rng();
                    let mut claimed = Vec::new();
                    loop {
                        if jitter {
                            thread::sleep(Duration::from_micros(rng.random_range(0..300)));
                        }
                        match importer.process_next(&format!("w{w}")).unwrap() {
                            Some((uuid, _)) => claimed.push(uuid),
                            None => break,
                        }
                    }
                    claimed
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

#[test]
fn hundred_orders_eight_workers_twenty_rounds() {
    for round in 0..20 {
        let stack = common::stack();
        let s = &stack.services;
        let orders: Vec<ImportOrder> =
            (0..100).map(|_| s.submit_order(stack.reits_order(), &seed::reits_user()).unwrap()).collect();
        let claimed: Vec<String> = run_workers(s, 8, true).into_iter().flatten().collect();

        let unique: HashSet<&String> = claimed.iter().collect();
        assert_eq!(claimed.len(), 100, "round {round}: claims");
        assert_eq!(unique.len(), 100, "round {round}: duplicate claim");
        for order in &orders {
            assert_eq!(s.db.get_order(&order.uuid).unwrap().status, OrderStatus::Completed, "round {round}");
        }
        let filesets = s.repo.list_filesets().unwrap();
        assert_eq!(filesets.len(), 100, "round {round}");
        // Every fileset holds the images of exactly one order.
        let mut per_order = BTreeMap::new();
        for f in &filesets {
            let block = s.repo.latest_block(f.image_ids[0], fairflow::importer::IMPORT_NAMESPACE).unwrap().unwrap();
            *per_order.entry(block.get("UUID").unwrap().to_string()).or_insert(0) += 1;
        }
        assert!(per_order.values().all(|&n| n == 1), "round {round}");
        assert_eq!(per_order.len(), 100);
    }
}

/// Oracle: claims are served oldest-first by (created_at, uuid). Every
/// interleaving of two claimers over the pending set therefore hands out
/// the i-th oldest order on the i-th successful claim, to whoever asked.
#[test]
fn two_claimers_every_interleaving() {
    const ORDERS: usize = 4;
    let calls = ORDERS + 2;
    for schedule in 0u32..(1 << calls) {
        let stack = common::stack();
        let s = &stack.services;
        let mut orders: Vec<ImportOrder> =
            (0..ORDERS).map(|_| s.submit_order(stack.reits_order(), &seed::reits_user()).unwrap()).collect();
        orders.sort_by(|a, b| (a.created_at, &a.uuid).cmp(&(b.created_at, &b.uuid)));

        let mut got: [Vec<String>; 2] = [Vec::new(), Vec::new()];
        let mut expected: [Vec<String>; 2] = [Vec::new(), Vec::new()];
        let mut next = 0;
        for call in 0..calls {
            let who = ((schedule >> call) & 1) as usize;
            if let Some(order) = s.db.claim_next_pending(&format!("c{who}")).unwrap() {
                got[who].push(order.uuid);
            }
            if next < ORDERS {
                expected[who].push(orders[next].uuid.clone());
                next += 1;
            }
        }
        assert_eq!(got, expected, "schedule {schedule:06b}");
    }
}

/// Terminal status depends on the order alone, not on how many workers ran it.
#[test]
fn one_worker_and_eight_workers_agree() {
    let outcome = |workers: usize| {
        let stack = common::stack();
        let s = &stack.services;
        let mut keyed = BTreeMap::new();
        for i in 0..24 {
            let mut request = stack.reits_order();
            request.preprocessing = match i % 3 {
                0 => None,
                1 => Some(PreprocessingSpec::new("org/fail:v1")),
                _ => Some(PreprocessingSpec::new("org/metadata:v2")),
            };
            if i % 5 == 4 {
                request.files = vec!["coreReits/imports/missing.czi".into()];
            }
            let order = s.submit_order(request, &seed::reits_user()).unwrap();
            keyed.insert(order.uuid, i);
        }
        run_workers(s, workers, workers > 1);
        let mut by_index = BTreeMap::new();
        for (uuid, i) in keyed {
            let order = s.db.get_order(&uuid).unwrap();
            by_index.insert(i, (order.status, order.error_message));
        }
        by_index
    };
    let serial = outcome(1);
    let parallel = outcome(8);
    assert_eq!(serial, parallel);
    assert!(serial.values().any(|(s, _)| *s == OrderStatus::Failed));
    assert!(serial.values().any(|(s, _)| *s == OrderStatus::Completed));
}
