mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::os::unix::fs::MetadataExt;
use std::path::PathBuf;

use fairflow::db::ProvenanceDb;
use fairflow::repo::{FilesetRequest, ImageRepo, NewObject, ObjectKind, TransferMode};
use fairflow::Database;
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Upsert(usize, usize),
    Delete(usize),
}

const GROUPS: [&str; 5] = ["Reits", "Krawczyk", "Jalink", "Neefjes", "Sixma"];
const FOLDERS: [&str; 5] = ["coreReits", "coreKrawczyk", "coreJalink", "shared", "scratch"];

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..GROUPS.len(), 0..FOLDERS.len()).prop_map(|(g, f)| Op::Upsert(g, f)),
        1 => (0..GROUPS.len()).prop_map(Op::Delete),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// 1000 random edits: the store agrees with a map model and never maps two groups to one folder.
    #[test]
    fn mappings_stay_one_to_one(ops in prop::collection::vec(op(), 1000)) {
        let db = ProvenanceDb::new(Database::open_in_memory().unwrap());
        let mut model: HashMap<&str, &str> = HashMap::new();
        for op in ops {
            match op {
                Op::Upsert(g, f) => {
                    let taken = model.iter().any(|(og, of)| *of == FOLDERS[f] && *og != GROUPS[g]);
                    let result = db.upsert_mapping(GROUPS[g], FOLDERS[f]);
                    prop_assert_eq!(result.is_err(), taken);
                    if taken {
                        prop_assert_eq!(result.unwrap_err().code(), "SUBFOLDER_TAKEN");
                    } else {
                        model.insert(GROUPS[g], FOLDERS[f]);
                    }
                }
                Op::Delete(g) => {
                    let result = db.delete_mapping(GROUPS[g]);
                    prop_assert_eq!(result.is_ok(), model.remove(GROUPS[g]).is_some());
                }
            }
            let stored = db.list_mappings().unwrap();
            let folders: BTreeSet<&str> = stored.iter().map(|m| m.subfolder.as_str()).collect();
            prop_assert_eq!(folders.len(), stored.len());
            let as_map: BTreeMap<&str, &str> = stored.iter().map(|m| (m.group.as_str(), m.subfolder.as_str())).collect();
            let expected: BTreeMap<&str, &str> = model.iter().map(|(g, f)| (*g, *f)).collect();
            prop_assert_eq!(as_map, expected);
        }
    }

    /// Every object whose block carries the value, or whose name contains it, is found; nothing else.
    #[test]
    fn search_finds_exactly_the_matching_objects(
        names in prop::collection::vec("[a-c]{1,4}", 1..12),
        values in prop::collection::vec("[a-c]{1,3}", 1..12),
        query in "[a-c]{1,2}",
    ) {
        let tmp = tempfile::tempdir().unwrap();
        let repo = ImageRepo::new(Database::open_in_memory().unwrap(), tmp.path());
        let mut expected = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let obj = repo.create_object(NewObject::new(ObjectKind::Dataset, name.clone(), "u", "g")).unwrap();
            let value = &values[i % values.len()];
            repo.annotate(obj.id, "ns", vec![("k".into(), value.clone())]).unwrap();
            if value == &query || name.contains(query.as_str()) {
                expected.push(obj.id);
            }
        }
        let found: Vec<u64> = repo.search_by_value(&query).unwrap().into_iter().map(|o| o.id).collect();
        prop_assert_eq!(found, expected);
    }
}

fn tree_bytes(root: &std::path::Path) -> u64 {
    let mut total = 0;
    for entry in fs::read_dir(root).unwrap() {
        let entry = entry.unwrap();
        let meta = fs::symlink_metadata(entry.path()).unwrap();
        if meta.is_dir() {
            total += tree_bytes(&entry.path());
        } else if meta.is_file() {
            total += meta.size();
        }
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// IN_PLACE imports add no file bytes to the managed tree; COPY imports add exactly the source bytes.
    #[test]
    fn in_place_imports_store_only_links(sizes in prop::collection::vec(0usize..4096, 1..6)) {
        let tmp = tempfile::tempdir().unwrap();
        let repo = ImageRepo::new(Database::open_in_memory().unwrap(), tmp.path().join("managed"));
        let ds = repo.create_object(NewObject::new(ObjectKind::Dataset, "d", "u", "g")).unwrap();
        let targets: Vec<PathBuf> = sizes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let p = tmp.path().join(format!("src{i}.tif"));
                fs::write(&p, vec![7u8; *n]).unwrap();
                p
            })
            .collect();
        let request = |mode| FilesetRequest {
            image_names: (0..targets.len()).map(|i| format!("img{i}.tif")).collect(),
            destination_id: ds.id,
            targets: targets.clone(),
            transfer_mode: mode,
            owner: "u".into(),
            group: "g".into(),
        };
        repo.register_fileset(request(TransferMode::InPlace)).unwrap();
        prop_assert_eq!(tree_bytes(&tmp.path().join("managed")), 0);
        repo.register_fileset(request(TransferMode::Copy)).unwrap();
        prop_assert_eq!(tree_bytes(&tmp.path().join("managed")), sizes.iter().sum::<usize>() as u64);
    }
}

#[test]
fn other_groups_cannot_order_from_foreign_folders() {
    let stack = common::stack();
    let s = &stack.services;
    for (user, foreign) in [
        (fairflow::seed::reits_user(), fairflow::seed::KRAWCZYK_FILES[0]),
        (fairflow::seed::krawczyk_user(), fairflow::seed::REITS_FILES[0]),
    ] {
        let mut request = stack.reits_order();
        request.files = vec![foreign.to_string()];
        assert_eq!(s.submit_order(request, &user).unwrap_err().code(), "PATH_OUTSIDE_GROUP");
        assert_eq!(s.browse_remote(&format!("../{}", foreign), &user).unwrap_err().code(), "PATH_ESCAPE");
    }
}
