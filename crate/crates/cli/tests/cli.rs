//! End-to-end runs of the binary against small fixtures: exit codes, file
//! contracts, seeded reproducibility, and the manifest round trip.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ppstat"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ppstat")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const CELLS_CSV: &str = "\
x,y,patient_id,sample_id,tissue_category,phenotype_cd19,phenotype_cd68,phenotype_cd3,phenotype_cd8,pstat3
0.12,0.30,p1,s1,stroma,1,0,0,0,0.5
0.80,0.25,p1,s1,tumor,1,0,0,0,0.8
0.45,0.60,p1,s1,stroma,0,1,0,0,0.2
0.70,0.82,p1,s1,tumor,0,1,0,0,
0.22,0.75,p1,s1,stroma,0,0,1,1,0.4
0.60,0.40,p1,s1,tumor,0,0,1,0,0.9
0.35,0.15,p1,s1,stroma,0,0,1,0,0.1
0.90,0.55,p1,s1,tumor,0,0,1,1,0.7
0.15,0.85,p2,s2,stroma,1,0,0,0,0.3
0.55,0.20,p2,s2,tumor,0,1,0,0,0.6
0.75,0.65,p2,s2,stroma,0,0,1,1,0.2
0.30,0.45,p2,s2,tumor,0,0,1,0,0.8
";

const CLINICAL_CSV: &str = "\
patient_id,primary,chemo,brca_mutation,parpi_inhibitor,stage,age_at_diagnosis,death,survival_time
p1,1,0,0,0,Stage II,61,0,120
p2,0,1,1,0,Stage III,55,1,88
";

fn schema_json() -> String {
    r#"{
        "window": {"kind": "explicit", "vertices": [[0,0],[1,0],[1,1],[0,1]]},
        "marks": {"pSTAT3": "pstat3"}
    }"#
    .to_string()
}

fn write_fixtures(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cells = dir.join("cells.csv");
    let clinical = dir.join("clinical.csv");
    let schema = dir.join("schema.json");
    fs::write(&cells, CELLS_CSV).unwrap();
    fs::write(&clinical, CLINICAL_CSV).unwrap();
    fs::write(&schema, schema_json()).unwrap();
    (cells, clinical, schema)
}

#[test]
fn ingest_writes_patterns_records_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (cells, clinical, schema) = write_fixtures(tmp.path());
    let out = tmp.path().join("out");
    let res = run(&[
        "ingest",
        "--cells",
        cells.to_str().unwrap(),
        "--clinical",
        clinical.to_str().unwrap(),
        "--schema",
        schema.to_str().unwrap(),
        "--min-type-count",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&res);
    assert!(out.join("patterns/p1.json").exists());
    assert!(out.join("patterns/p2.json").exists());
    assert!(out.join("records.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "ingest");
    assert!(manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v == "records.json"));
}

#[test]
fn summary_emits_csv_and_svg_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    assert_success(&run(&[
        "simulate",
        "--model",
        "csr",
        "--lambda",
        "120",
        "--seed",
        "3",
        "--out",
        sim.to_str().unwrap(),
    ]));
    let out = tmp.path().join("sum");
    let res = run(&[
        "summary",
        "--pattern",
        sim.join("pattern.json").to_str().unwrap(),
        "--stat",
        "lcross",
        "--r0",
        "0.25",
        "--grid-points",
        "64",
        "--intensity",
        "constant",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&res);
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(csv.starts_with("r,value,theoretical"));
    assert_eq!(csv.lines().count(), 65);
    let svg = fs::read_to_string(out.join("summary.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn envelope_runs_are_byte_identical_for_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    assert_success(&run(&[
        "simulate",
        "--model",
        "csr",
        "--lambda",
        "100",
        "--seed",
        "11",
        "--out",
        sim.to_str().unwrap(),
    ]));
    let pattern = sim.join("pattern.json");
    let mut outputs = Vec::new();
    for name in ["e1", "e2"] {
        let out = tmp.path().join(name);
        let res = run(&[
            "envelope",
            "--pattern",
            pattern.to_str().unwrap(),
            "--stat",
            "lcentred",
            "--null",
            "csr",
            "--nsim",
            "99",
            "--seed",
            "7",
            "--grid-points",
            "48",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_success(&res);
        outputs.push(fs::read(out.join("envelope.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn config_file_overrides_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    assert_success(&run(&[
        "simulate",
        "--model",
        "csr",
        "--lambda",
        "100",
        "--seed",
        "11",
        "--out",
        sim.to_str().unwrap(),
    ]));
    let pattern = sim.join("pattern.json");
    let config = tmp.path().join("run.json");
    fs::write(&config, r#"{"seed": 7}"#).unwrap();
    let direct = tmp.path().join("direct");
    assert_success(&run(&[
        "envelope",
        "--pattern",
        pattern.to_str().unwrap(),
        "--stat",
        "lcentred",
        "--null",
        "csr",
        "--nsim",
        "49",
        "--alpha",
        "0.1",
        "--seed",
        "7",
        "--grid-points",
        "32",
        "--out",
        direct.to_str().unwrap(),
    ]));
    let via_config = tmp.path().join("via_config");
    assert_success(&run(&[
        "envelope",
        "--pattern",
        pattern.to_str().unwrap(),
        "--stat",
        "lcentred",
        "--null",
        "csr",
        "--nsim",
        "49",
        "--alpha",
        "0.1",
        "--seed",
        "12345",
        "--config",
        config.to_str().unwrap(),
        "--grid-points",
        "32",
        "--out",
        via_config.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read(direct.join("envelope.json")).unwrap(),
        fs::read(via_config.join("envelope.json")).unwrap()
    );
}

#[test]
fn full_pipeline_segregation_risk_smooth_counts_anova() {
    let tmp = tempfile::tempdir().unwrap();
    let (cells, clinical, schema) = write_fixtures(tmp.path());
    let ingest = tmp.path().join("ingest");
    assert_success(&run(&[
        "ingest",
        "--cells",
        cells.to_str().unwrap(),
        "--clinical",
        clinical.to_str().unwrap(),
        "--schema",
        schema.to_str().unwrap(),
        "--min-type-count",
        "0",
        "--out",
        ingest.to_str().unwrap(),
    ]));
    let p1 = ingest.join("patterns/p1.json");

    let seg = tmp.path().join("seg");
    let res = run(&[
        "segregation",
        "--pattern",
        p1.to_str().unwrap(),
        "--nsim",
        "99",
        "--seed",
        "5",
        "--group-size",
        "2",
        "--out",
        seg.to_str().unwrap(),
    ]);
    assert_success(&res);
    let seg_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(seg.join("segregation.json")).unwrap()).unwrap();
    assert!(seg_json["p_value"].as_f64().unwrap() > 0.0);

    let risk = tmp.path().join("risk");
    assert_success(&run(&[
        "risk",
        "--pattern",
        p1.to_str().unwrap(),
        "--i",
        "B-cell",
        "--j",
        "Macrophage",
        "--nsim",
        "19",
        "--grid",
        "24",
        "--seed",
        "9",
        "--out",
        risk.to_str().unwrap(),
    ]));
    assert!(risk.join("risk.svg").exists());
    assert!(risk.join("risk.json").exists());

    let smooth = tmp.path().join("smooth");
    assert_success(&run(&[
        "smooth",
        "--pattern",
        p1.to_str().unwrap(),
        "--mark",
        "pSTAT3",
        "--bandwidth",
        "0.3",
        "--grid",
        "32",
        "--out",
        smooth.to_str().unwrap(),
    ]));
    assert!(smooth.join("smooth.svg").exists());

    let counts = tmp.path().join("counts");
    assert_success(&run(&[
        "counts",
        "--patterns",
        ingest.join("patterns").to_str().unwrap(),
        "--records",
        ingest.join("records.json").to_str().unwrap(),
        "--working",
        "independence",
        "--terms",
        "immune,tissue",
        "--out",
        counts.to_str().unwrap(),
    ]));
    let counts_csv = fs::read_to_string(counts.join("counts.csv")).unwrap();
    assert!(counts_csv.starts_with("patient,immune,tissue,count,offset"));
    assert!(counts.join("gee.txt").exists());
}

#[test]
fn anova_over_simulated_cohort() {
    // Build a small cohort of pattern JSONs directly with the library.
    use ppstat::geometry::{Point2, Window};
    use ppstat::pattern::{MultitypePattern, PatientRecord, Stage};

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("patterns");
    fs::create_dir_all(&dir).unwrap();
    let window = Window::rectangle(0.0, 0.0, 1.0, 1.0).unwrap();
    let mut records = Vec::new();
    for p in 0..8 {
        let mut pts = Vec::new();
        for i in 0..60 {
            // deterministic scatter, slightly different per patient
            let t = (i as f64 + 1.0) * (p as f64 + 2.0);
            pts.push(Point2::new(
                (t * 0.618_033_98).fract() * 0.98 + 0.01,
                (t * 0.414_213_56).fract() * 0.98 + 0.01,
            ));
        }
        let n = pts.len();
        let pattern = MultitypePattern::new(
            format!("p{p}"),
            pts,
            vec!["all".into()],
            vec![0; n],
            window.clone(),
        )
        .unwrap();
        fs::write(
            dir.join(format!("p{p}.json")),
            serde_json::to_string(&pattern).unwrap(),
        )
        .unwrap();
        records.push(PatientRecord {
            patient_id: format!("p{p}"),
            primary_tumour: true,
            prior_chemo: p % 2 == 0,
            brca: false,
            parpi: false,
            stage: Some(Stage::II),
            age: 60.0,
            death: false,
            survival_time: None,
        });
    }
    let records_path = tmp.path().join("records.json");
    fs::write(&records_path, serde_json::to_string(&records).unwrap()).unwrap();

    let out = tmp.path().join("anova");
    let res = run(&[
        "anova",
        "--patterns",
        dir.to_str().unwrap(),
        "--records",
        records_path.to_str().unwrap(),
        "--group",
        "prior_chemo",
        "--nperm",
        "199",
        "--grid-points",
        "24",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&res);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("anova.json")).unwrap()).unwrap();
    assert!(json["anova_p"].as_f64().unwrap() >= 1.0 / 200.0);
    assert!(out.join("anova.svg").exists());
    assert!(out.join("levene.svg").exists());
    assert!(out.join("curves.csv").exists());
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    // unknown flag -> usage error -> exit 1
    let res = run(&["summary", "--no-such-flag"]);
    assert_eq!(res.status.code(), Some(1));
    // missing input file -> data error -> exit 2
    let tmp = tempfile::tempdir().unwrap();
    let res = run(&[
        "summary",
        "--pattern",
        tmp.path().join("nope.json").to_str().unwrap(),
        "--stat",
        "kcross",
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}
