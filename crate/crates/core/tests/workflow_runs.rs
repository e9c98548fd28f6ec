mod common;

use std::collections::BTreeMap;

use fairflow::analyzer::{
    cellpose_definition, InputSelection, OutputOptions, RunRequest, CONVERT_SCRIPT, WORKFLOW_NAMESPACE,
};
use fairflow::db::{replay, EventKind};
use fairflow::scheduler::JobState;
use fairflow::seed;
use serde_json::json;

fn request(dataset: u64, images: Vec<u64>) -> RunRequest {
    RunRequest {
        workflow_name: "cellpose".into(),
        version: Some("v1.3.1".into()),
        input_selection: InputSelection { container_id: dataset, image_ids: images },
        params: json!({"nuc_channel": 3, "use_gpu": false, "cp_model": "nuclei", "diameter": 0, "prob_threshold": 0.5})
            .as_object()
            .unwrap()
            .clone(),
        output_options: OutputOptions {
            target_dataset_id: dataset,
            attach_zip: false,
            attach_tables: false,
            email_on_done: false,
            rename_pattern: None,
        },
    }
}

fn params_of(pairs: &[(String, String)]) -> BTreeMap<String, String> {
    pairs.iter().filter(|(k, _)| k.starts_with("Param_")).cloned().collect()
}

#[test]
fn completed_run_annotates_its_mask_image() {
    let stack = common::stack();
    let s = &stack.services;
    let images = stack.import_files(&["coreReits/imports/18-CRO-20 Heufl spinal cord.czi"]);
    let dataset = stack.seeded.reits_dataset;
    let run = s.analyzer.start_run(request(dataset, images.clone()), &seed::reits_user()).unwrap();
    let done = s.analyzer.drive_to_completion(&run, 50).unwrap();
    assert_eq!((done.status.as_str(), done.progress), ("DONE", 100.0));

    let hits = s.repo.search_by_value(&run).unwrap();
    assert_eq!(hits.len(), 1);
    let mask = &hits[0];
    assert_eq!(mask.name, "18-CRO-20 Heufl spinal cord_mask.tif");
    let block = s.repo.latest_block(mask.id, WORKFLOW_NAMESPACE).unwrap().unwrap();
    for (k, v) in [
        ("Param_nuc_channel", "3"),
        ("Param_use_gpu", "False"),
        ("Param_cp_model", "nuclei"),
        ("Param_diameter", "0"),
        ("Param_prob_threshold", "0.5"),
        ("Param_use_zarr", "False"),
        ("Workflow_ID", run.as_str()),
        ("Version", "v1.3.1"),
        ("Input_Image_ID", images[0].to_string().as_str()),
    ] {
        assert_eq!(block.get(k), Some(v), "{k}");
    }
    let events = s.db.events_for_run(&run).unwrap();
    let submitted = events.iter().find(|e| e.event_kind == EventKind::JobSubmitted && e.task_name == "cellpose").unwrap();
    assert_eq!(block.get("Sbatch_Command"), submitted.payload.get("sbatch_command").map(String::as_str));
    assert!(block.get("Sbatch_Command").unwrap().starts_with("sbatch"));

    // The image's Param_* pairs are exactly the recorded run parameters.
    let created = &events[0];
    let recorded: BTreeMap<String, String> =
        created.payload.iter().filter(|(k, _)| k.starts_with("Param_")).map(|(k, v)| (k.clone(), v.clone())).collect();
    assert_eq!(params_of(&block.pairs), recorded);

    // Projection after every prefix of the log.
    let mut history = Vec::new();
    for n in 1..=events.len() {
        let p = replay(&events[..n]).remove(&run).unwrap();
        history.push((p.status, p.progress));
    }
    assert!(history.windows(2).all(|w| w[0].1 <= w[1].1), "{history:?}");
    assert!(history.contains(&("JOB_COMPLETED".to_string(), 90.0)));
    assert_eq!(history.last().unwrap(), &("DONE".to_string(), 100.0));
    assert_eq!(events.last().unwrap().event_kind, EventKind::TaskDone);
}

#[test]
fn failed_conversion_creates_no_output() {
    let stack = common::stack();
    let s = &stack.services;
    let images = stack.import_files(&["coreReits/imports/cells.zarr"]);
    let dataset = stack.seeded.reits_dataset;
    let before = s.repo.list_children(Some(dataset)).unwrap().len();
    s.scheduler.inject_failure(CONVERT_SCRIPT, JobState::Running).unwrap();
    let run = s.analyzer.start_run(request(dataset, images), &seed::reits_user()).unwrap();
    let end = s.analyzer.drive_to_completion(&run, 50).unwrap();
    assert_eq!((end.status.as_str(), end.progress), ("FAILED", 0.0));
    assert_eq!(s.repo.list_children(Some(dataset)).unwrap().len(), before);
    assert!(s.repo.search_by_value(&run).unwrap().is_empty());
    let events = s.db.events_for_run(&run).unwrap();
    let last = events.last().unwrap();
    assert_eq!(last.event_kind, EventKind::TaskFailed);
    assert_eq!(last.task_name, CONVERT_SCRIPT);
    assert!(events.iter().all(|e| e.task_name != "cellpose" || e.event_kind == EventKind::RunCreated));
}

#[test]
fn outputs_can_be_renamed_and_bundled() {
    let stack = common::stack();
    let s = &stack.services;
    let images = stack.import_files(&seed::REITS_FILES);
    let dataset = stack.seeded.reits_dataset;
    let mut req = request(dataset, images);
    req.output_options.rename_pattern = Some("{original_file}_seg.{ext}".into());
    req.output_options.attach_zip = true;
    req.output_options.attach_tables = true;
    let run = s.analyzer.start_run(req, &seed::reits_user()).unwrap();
    s.analyzer.drive_to_completion(&run, 50).unwrap();
    let mut names: Vec<String> = s.repo.search_by_value(&run).unwrap().into_iter().map(|o| o.name).collect();
    names.sort();
    assert_eq!(names, ["18-20xPNeo-with-TIE_DIC_01_seg.tif", "18-CRO-20 Heufl spinal cord_seg.tif"]);
    let attached: Vec<String> = s.repo.attachments(dataset).unwrap().into_iter().map(|a| a.name).collect();
    assert_eq!(attached, ["results.zip", "measurements.csv"]);
}

#[test]
fn request_validation() {
    let stack = common::stack();
    let s = &stack.services;
    let images = stack.import_files(&seed::REITS_FILES);
    let dataset = stack.seeded.reits_dataset;
    let mut bad = request(dataset, images.clone());
    bad.params.insert("nuc_channel".into(), json!("three"));
    assert_eq!(s.analyzer.start_run(bad, &seed::reits_user()).unwrap_err().code(), "VALIDATION_FAILED");
    let mut stray = request(dataset, vec![images[0], 999_999]);
    stray.version = None;
    assert_eq!(s.analyzer.start_run(stray, &seed::reits_user()).unwrap_err().code(), "VALIDATION_FAILED");
    let err = s.analyzer.start_run(request(dataset, images.clone()), &seed::krawczyk_user()).unwrap_err();
    assert_eq!(err.code(), "FORBIDDEN_GROUP");
    let mut elsewhere = request(stack.seeded.krawczyk_dataset, vec![]);
    elsewhere.output_options.target_dataset_id = stack.seeded.krawczyk_dataset;
    elsewhere.input_selection.image_ids = images.clone();
    let err = s.analyzer.start_run(elsewhere, &seed::krawczyk_user()).unwrap_err();
    assert_eq!(err.code(), "FORBIDDEN_GROUP");
    let mut unknown = request(dataset, images.clone());
    unknown.workflow_name = "stardist".into();
    assert_eq!(s.analyzer.start_run(unknown, &seed::reits_user()).unwrap_err().code(), "UNKNOWN_WORKFLOW");
    let mut target = request(dataset, images);
    target.output_options.target_dataset_id = 424_242;
    assert_eq!(s.analyzer.start_run(target, &seed::reits_user()).unwrap_err().code(), "TARGET_DATASET_MISSING");
    assert_eq!(s.registry.get("cellpose").unwrap(), cellpose_definition());
}
