mod common;

use std::fs;
use std::sync::Arc;

use fairflow::importer::{ImportStep, IMPORT_NAMESPACE, PREPROCESSING_NAMESPACE};
use fairflow::runner::PreprocessingSpec;
use fairflow::seed;
use fairflow::OrderStatus;

#[test]
fn two_file_order_links_both_files_in_place() {
    let stack = common::stack();
    let s = &stack.services;
    let order = s.submit_order(stack.reits_order(), &seed::reits_user()).unwrap();
    assert_eq!(s.importer.drain("w").unwrap(), 1);
    let done = s.db.get_order(&order.uuid).unwrap();
    assert_eq!(done.status, OrderStatus::Completed);

    let filesets = s.repo.list_filesets().unwrap();
    assert_eq!(filesets.len(), 1);
    let remote = &s.config.repo.remote_root;
    for (entry, rel) in filesets[0].entries.iter().zip(seed::REITS_FILES) {
        let meta = fs::symlink_metadata(&entry.link_path).unwrap();
        assert!(meta.file_type().is_symlink());
        assert_eq!(fs::canonicalize(&entry.link_path).unwrap(), fs::canonicalize(remote.join(rel)).unwrap());
    }
    let hits = s.repo.search_by_value(&order.uuid).unwrap();
    let mut ids: Vec<u64> = hits.iter().map(|o| o.id).collect();
    ids.sort();
    let mut expected = filesets[0].image_ids.clone();
    expected.sort();
    assert_eq!(ids, expected);

    let block = s.repo.latest_block(expected[0], IMPORT_NAMESPACE).unwrap().unwrap();
    assert_eq!(
        block.keys(),
        ["Added by", "UUID", "Filepath", "Group", "Username", "DestinationID", "DestinationType", "Files", "FileNames", "Import_Timestamp"]
    );
    assert_eq!(block.get("UUID"), Some(order.uuid.as_str()));
    assert_eq!(block.get("FileNames"), Some("[18-CRO-20 Heufl spinal cord.czi, 18-20xPNeo-with-TIE_DIC_01.czi]"));
    assert_eq!(block.get("Added by"), Some("luik"));
    let history: Vec<OrderStatus> = s.db.order_history(&order.uuid).unwrap().into_iter().map(|(st, _)| st).collect();
    assert_eq!(history, [OrderStatus::Pending, OrderStatus::Started, OrderStatus::Completed]);
}

#[test]
fn converted_file_lands_next_to_input_and_workdir_is_cleaned() {
    let stack = common::stack();
    let s = &stack.services;
    let mut request = stack.reits_order();
    request.files.truncate(1);
    request.preprocessing = Some(PreprocessingSpec::new("cellularimagingcf/convertleica:v1.2.0"));
    let order = s.submit_order(request, &seed::reits_user()).unwrap();
    s.importer.drain("w").unwrap();
    let history: Vec<OrderStatus> = s.db.order_history(&order.uuid).unwrap().into_iter().map(|(st, _)| st).collect();
    assert_eq!(history, [OrderStatus::Pending, OrderStatus::Started, OrderStatus::Preprocessing, OrderStatus::Completed]);

    let converted = s.config.repo.remote_root.join("coreReits/imports/_converted/18-CRO-20 Heufl spinal cord.ome.tiff");
    assert!(converted.is_file());
    let fileset = &s.repo.list_filesets().unwrap()[0];
    assert_eq!(fs::canonicalize(&fileset.entries[0].link_path).unwrap(), fs::canonicalize(&converted).unwrap());
    assert_eq!(fs::read_dir(&s.config.importer.local_workdir).unwrap().count(), 0);
    let block = s.repo.latest_block(fileset.image_ids[0], PREPROCESSING_NAMESPACE).unwrap().unwrap();
    assert_eq!(block.pairs[0], ("container_ref".to_string(), "cellularimagingcf/convertleica:v1.2.0".to_string()));
    assert_eq!(block.get("converter_version"), Some("v1.2.0"));
    assert_eq!(s.db.container_runs(&order.uuid).unwrap().len(), 1);
}

#[test]
fn container_failure_fails_the_preprocess_step() {
    let stack = common::stack();
    let s = &stack.services;
    let mut request = stack.reits_order();
    request.preprocessing = Some(PreprocessingSpec::new("org/fail:v1"));
    let order = s.submit_order(request, &seed::reits_user()).unwrap();
    s.importer.drain("w").unwrap();
    let failed = s.db.get_order(&order.uuid).unwrap();
    assert_eq!(failed.status, OrderStatus::Failed);
    assert!(failed.error_message.unwrap().starts_with("preprocess: "));
    assert!(s.repo.list_filesets().unwrap().is_empty());
}

#[test]
fn each_injected_step_failure_names_the_step() {
    for step in ImportStep::ALL {
        let stack = common::stack();
        let s = &stack.services;
        let bad = s.submit_order(stack.reits_order(), &seed::reits_user()).unwrap();
        let bad_uuid = bad.uuid.clone();
        let importer = s.importer.clone().with_fault_hook(Arc::new(move |order, at| {
            (order.uuid == bad_uuid && at == step).then(|| "INJECTED".to_string())
        }));
        importer.drain("w").unwrap();
        let failed = s.db.get_order(&bad.uuid).unwrap();
        assert_eq!(failed.status, OrderStatus::Failed, "{step}");
        assert_eq!(failed.error_message.as_deref(), Some(format!("{step}: INJECTED").as_str()));

        let good = s.submit_order(stack.reits_order(), &seed::reits_user()).unwrap();
        importer.drain("w").unwrap();
        assert_eq!(s.db.get_order(&good.uuid).unwrap().status, OrderStatus::Completed, "{step}");
    }
}

#[test]
fn orders_outside_the_group_folder_are_rejected() {
    let stack = common::stack();
    let mut request = stack.reits_order();
    request.files = seed::KRAWCZYK_FILES.iter().map(|s| s.to_string()).collect();
    let err = stack.services.submit_order(request, &seed::reits_user()).unwrap_err();
    assert_eq!(err.code(), "PATH_OUTSIDE_GROUP");
}

#[test]
fn remote_browsing_stays_inside_the_group_folder() {
    let stack = common::stack();
    let s = &stack.services;
    let top = s.browse_remote("", &seed::reits_user()).unwrap();
    assert_eq!(top.iter().map(|e| e.name.as_str()).collect::<Vec<_>>(), ["imports"]);
    let files = s.browse_remote("imports", &seed::reits_user()).unwrap();
    assert_eq!(files.len(), 2);
    assert!(files.iter().all(|f| f.path.starts_with("coreReits/imports/") && !f.is_dir));
    assert_eq!(s.browse_remote("../coreKrawczyk", &seed::reits_user()).unwrap_err().code(), "PATH_ESCAPE");
    assert_eq!(s.browse_remote("/etc/../..", &seed::reits_user()).unwrap_err().code(), "PATH_ESCAPE");
    let stranger = fairflow::Principal::new("x", "Nobody");
    assert_eq!(s.browse_remote("", &stranger).unwrap_err().code(), "UNMAPPED_GROUP");
}
