use std::collections::BTreeMap;

use pwrd::panel_csv::{read_panel, write_panel, TestInSource};
use pwrd::schema::{Schema, ThresholdRule};
use pwrd_core::sim::{generate_panel, Scenario};
use pwrd_core::Error as CoreError;

fn read(csv: &str, schema: Option<&Schema>) -> pwrd::Result<pwrd::panel_csv::Ingested> {
    read_panel(csv.as_bytes(), schema)
}

fn core_err(r: pwrd::Result<pwrd::panel_csv::Ingested>) -> CoreError {
    match r {
        Err(pwrd::Error::Core(e)) => e,
        other => panic!("expected a core error, got {other:?}"),
    }
}

#[test]
fn four_row_panel() {
    let csv = "unit,cluster,treatment,cohort,grade,year,outcome\n\
               a,s1,1,1,0,1,5\nb,s1,1,1,0,1,7\nc,s2,0,1,0,1,4\nd,s2,0,1,0,1,6\n";
    let p = read(csv, None).unwrap().panel;
    assert_eq!(p.n_groups(), 1);
    assert_eq!(p.n_clusters(), 2);
    assert!(!p.has_test_in());
}

#[test]
fn treatment_varying_in_cluster_is_rejected() {
    let csv = "unit,cluster,treatment,cohort,grade,year,outcome\na,s1,1,1,0,1,5\nb,s1,0,1,0,1,7\n";
    assert_eq!(core_err(read(csv, None)), CoreError::TreatmentVariesWithinCluster("s1".into()));
}

#[test]
fn row_errors_carry_row_numbers() {
    let csv = "unit,cluster,treatment,cohort,grade,year,outcome\n\
               a,s1,1,1,0,1,5\nb,s1,2,1,0,1,7\nc,s2,0,1,x,1,4\n";
    match core_err(read(csv, None)) {
        CoreError::InvalidRows(rows) => {
            assert_eq!(rows.iter().map(|r| r.row).collect::<Vec<_>>(), [2, 3]);
            assert!(rows[0].message.contains("treatment must be 0 or 1"));
            assert!(rows[1].message.contains("grade"));
        }
        e => panic!("{e:?}"),
    }
}

#[test]
fn missing_column_and_duplicates() {
    let csv = "unit,cluster,treatment,cohort,grade,outcome\na,s1,1,1,0,5\n";
    assert_eq!(core_err(read(csv, None)), CoreError::MissingColumn("year".into()));
    let csv = "unit,cluster,treatment,cohort,grade,year,outcome\na,s1,1,1,0,1,5\na,s1,1,1,0,1,6\n";
    assert!(matches!(core_err(read(csv, None)), CoreError::DuplicateObservation { year: 1, .. }));
}

#[test]
fn missing_outcomes_are_deleted_and_reported() {
    let csv = "unit,cluster,treatment,cohort,grade,year,outcome\n\
               a,s1,1,1,0,1,5\nb,s1,1,1,0,1,\nc,s2,0,1,0,1,4\nd,s2,0,1,0,1,6\n";
    let ing = read(csv, None).unwrap();
    assert_eq!(ing.deleted_rows, [2]);
    assert_eq!(ing.panel.len(), 3);
}

#[test]
fn schema_maps_column_names() {
    let csv = "id,school,z,coh,gr,yr,score,flag,blk\n\
               a,s1,1,1,0,1,5,0,b1\na,s1,1,1,1,2,7,1,b1\nc,s2,0,1,0,1,4,1,b1\nc,s2,0,1,1,2,6,1,b1\n";
    let schema: Schema = serde_json::from_str(
        r#"{"unit":"id","cluster":"school","treatment":"z","cohort":"coh","grade":"gr","year":"yr",
            "outcome":"score","tested_in":"flag","block":"blk"}"#,
    )
    .unwrap();
    let ing = read(csv, Some(&schema)).unwrap();
    assert_eq!(ing.test_in_source, TestInSource::Column);
    assert_eq!(ing.panel.n_groups(), 2);
    assert_eq!(ing.panel.block_labels(), ["b1"]);
    assert!(serde_json::from_str::<Schema>(r#"{"unit":"id","bogus":"x"}"#).is_err());
}

#[test]
fn threshold_rule_derives_persistent_flags() {
    let csv = "unit,cluster,treatment,cohort,grade,year,outcome\n\
               a,s1,1,1,0,1,50\na,s1,1,1,1,2,40\na,s1,1,1,2,3,90\n\
               b,s2,0,1,0,1,95\nb,s2,0,1,1,2,99\nb,s2,0,1,2,3,70\n";
    let schema = Schema {
        test_in_rule: Some(ThresholdRule {
            score: None,
            cutoffs: BTreeMap::from([(0, 60.0), (1, 60.0), (2, 80.0)]),
            defer_one_year: false,
        }),
        ..Schema::default()
    };
    let ing = read(csv, Some(&schema)).unwrap();
    assert_eq!(ing.test_in_source, TestInSource::ThresholdRule);
    let flags: Vec<bool> = ing.panel.observations().iter().map(|o| o.tested_in).collect();
    assert_eq!(flags, [true, true, true, false, false, true]);
}

#[test]
fn non_monotone_flags_are_rejected() {
    let csv = "unit,cluster,treatment,cohort,grade,year,outcome,tested_in\n\
               a,s1,1,1,0,1,5,1\na,s1,1,1,1,2,7,0\n";
    assert_eq!(core_err(read(csv, None)), CoreError::NonMonotoneTestIn("a".into()));
}

#[test]
fn export_and_reingest_is_identical() {
    let s = Scenario::calibrated_default(0.15).unwrap();
    let panel = generate_panel(&s, 7).unwrap();
    let mut buf = Vec::new();
    write_panel(&panel, &mut buf).unwrap();
    let back = read_panel(buf.as_slice(), None).unwrap();
    assert!(back.deleted_rows.is_empty());
    assert_eq!(back.panel, panel);
}

#[test]
fn first_cohort_of_default_design_has_ten_groups() {
    let panel = generate_panel(&Scenario::calibrated_default(0.15).unwrap(), 0).unwrap();
    let cohort1 = panel.catalog().iter().filter(|g| g.cohort == 1).count();
    assert_eq!(cohort1, 10);
    let total: usize = panel.catalog().iter().map(|g| g.n).sum();
    assert_eq!(total, panel.len());
    assert_eq!(panel.n_clusters(), 52);
}
