use super::*;

fn tiny(dir: &Path) -> RunConfig {
    let text = format!(
        r#"
output_dir = "{}"
global_seed = 3
explain_patients = 2

[generator]
n_patients = 400
visits_mean = 6.0
distinct_codes_mean = 5.0

[student.arch]
embed_dim = 3
hidden_dim = 3
n_inducing = 4

[student.bdl]
max_epochs = 1
batch_size = 64

[student.bdld]
max_epochs = 1
batch_size = 64

[metrics]
n_samples = 4
ci_rounds = 4

[association]
contextual_samples = 2
coefficient_samples = 20

[explainer]
iterations = 4
baseline_samples = 3
samples_per_step = 2
"#,
        dir.display()
    );
    parse_config_str(&text).unwrap()
}

#[test]
fn minimal_config_takes_defaults() {
    let c = parse_config_str("output_dir = \"out\"").unwrap();
    assert_eq!(c.student.bdld.alpha, 0.5);
    assert_eq!(c.student.bdl.learning_rate, 7e-4);
    assert_eq!(c.explainer.gamma, 0.1);
    assert_eq!(c.metrics.n_samples, 30);
    assert_eq!(c.teacher.kind, TeacherKind::Oracle);
}

#[test]
fn bad_configs_are_rejected() {
    let err = |t: &str| match parse_config_str(t) {
        Err(Error::Config(m)) => m,
        other => panic!("{other:?}"),
    };
    assert!(err("output_dir = \"o\"\n[student.bdld]\nalpha = 1.5").contains("alpha"));
    assert!(err("global_seed = 1").contains("output_dir"));
    assert!(err("output_dir = \"o\"\n[explainer]\ngama = 0.2").contains("gama"));
    assert!(err("output_dir = \"o\"\n[generator]\nseed = 4").contains("global_seed"));
    assert!(err("output_dir = \"o\"\n[student.arch]\nvocab_size = 10").contains("vocab_size"));
    assert!(err("output_dir = \"o\"\n[metrics]\nn_samples = 5\nci_rounds = 6").contains("ci_rounds"));
}

#[test]
fn stage_names_round_trip() {
    for s in Stage::ALL {
        assert_eq!(Stage::parse(s.name()), Some(s));
        for d in s.dependencies() {
            assert!(d < &s);
        }
    }
    assert_eq!(Stage::parse("distill"), None);
}

#[test]
fn dependencies_are_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    let mut manifest = RunManifest::default();
    match run_stage(&config, Stage::Associate, &mut manifest, false) {
        Err(Error::MissingStages { stage, required }) => {
            assert_eq!(stage, "associate");
            assert_eq!(required, vec!["generate", "train-bdld"]);
        }
        other => panic!("{other:?}"),
    }
}

fn read(dir: &Path, f: &str) -> Vec<u8> {
    std::fs::read(dir.join(f)).unwrap()
}

#[test]
fn full_run_resumes_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    let (manifest, outcomes) = run_all(&config, false).unwrap();
    assert_eq!(manifest.stages.len(), 7);
    assert!(outcomes.iter().all(|(_, o)| *o == StageOutcome::Ran));
    for s in Stage::ALL {
        assert!(manifest.verified(s, dir.path()).is_some(), "{s}");
    }
    let report = read(dir.path(), REPORT_FILE);
    let text = String::from_utf8(report.clone()).unwrap();
    assert!(text.contains("| BDLD |") && text.contains("| BDL |") && text.contains("| Teacher |"));

    // a second pass is a no-op that leaves the manifest untouched
    let (again, outcomes) = run_all(&config, false).unwrap();
    assert!(outcomes.iter().all(|(_, o)| *o == StageOutcome::UpToDate));
    assert_eq!(again, manifest);
    assert_eq!(read(dir.path(), REPORT_FILE), report);

    // a deleted intermediate is rebuilt identically and downstream stages stay current
    let victim = "metrics/bdl_ci30.json";
    let before = read(dir.path(), victim);
    std::fs::remove_file(dir.path().join(victim)).unwrap();
    let (_, outcomes) = run_all(&config, false).unwrap();
    for (s, o) in outcomes {
        assert_eq!(o == StageOutcome::Ran, s == Stage::Evaluate, "{s}");
    }
    assert_eq!(read(dir.path(), victim), before);

    // an independent run at the same seed matches byte for byte
    let other = tempfile::tempdir().unwrap();
    let mut second = config.clone();
    second.output_dir = other.path().to_path_buf();
    run_all(&second, false).unwrap();
    for f in [
        "metrics/summary.json",
        "metrics/bdld_mean30.json",
        "association/association.csv",
        "cohort.jsonl",
    ] {
        assert_eq!(read(dir.path(), f), read(other.path(), f), "{f}");
    }

    // a changed config slice reruns that stage and the stages after it
    let mut changed = config.clone();
    changed.metrics.n_bins = 5;
    let (_, outcomes) = run_all(&changed, false).unwrap();
    for (s, o) in outcomes {
        assert_eq!(o == StageOutcome::Ran, s == Stage::Evaluate, "{s}");
    }
}

#[test]
fn report_marks_missing_sections() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    let mut manifest = RunManifest::default();
    run_stage(&config, Stage::Generate, &mut manifest, false).unwrap();
    let path = write_report(&manifest, dir.path()).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.contains("_Absent: stage `associate` has not completed._"));
    assert!(text.contains("| train-bdl | - | - | not run |"));
}
