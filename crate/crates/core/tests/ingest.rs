use std::fs::File;
use std::path::PathBuf;

use chrono::NaiveDate;
use epigraph::data::{case_file_regions, ingest_cases, DatasetBundle, IngestOptions};
use epigraph::graph::{edge_list_labels, parse_edge_list, RegionGraph};
use epigraph::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn day(d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2022, 3, d).unwrap()
}

#[test]
fn fixture_files_build_a_bundle() {
    let edges = std::fs::read_to_string(fixture("edges.csv")).unwrap();
    let labels = edge_list_labels(&edges);
    assert_eq!(labels, ["Alpha", "Beta", "Gamma"]);
    let graph = RegionGraph::new(labels.clone(), &parse_edge_list(&edges, &labels).unwrap()).unwrap();

    let in_file = case_file_regions(File::open(fixture("cases.csv")).unwrap()).unwrap();
    assert_eq!(in_file, ["Alpha", "Beta", "Gamma"]);
    let cases = ingest_cases(File::open(fixture("cases.csv")).unwrap(), &labels, &IngestOptions::default()).unwrap();
    assert_eq!(cases.dates().first(), Some(&day(1)));
    assert_eq!(cases.days(), 4);
    // The probable row is dropped and the blank count is one case.
    assert_eq!(cases.counts()[0], [4, 3, 0, 0]);
    assert_eq!(cases.counts()[1], [1, 0, 0, 5]);
    assert_eq!(cases.counts()[2], [0, 1, 0, 0]);
    assert_eq!(cases.total(), 14);

    let bundle = DatasetBundle::new(cases, graph, None).unwrap();
    assert_eq!(bundle.graph.n(), 3);
}

#[test]
fn explicit_range_pads_and_trims() {
    let labels: Vec<String> = ["Alpha", "Beta", "Gamma"].map(String::from).to_vec();
    let opts = IngestOptions {
        range: Some(day(2)..=day(6)),
    };
    let cases = ingest_cases(File::open(fixture("cases.csv")).unwrap(), &labels, &opts).unwrap();
    assert_eq!(cases.days(), 5);
    assert_eq!(cases.counts()[0], [3, 0, 0, 0, 0]);
    assert_eq!(cases.total(), 9);
}

#[test]
fn unknown_regions_report_their_line() {
    let labels: Vec<String> = ["Alpha", "Beta"].map(String::from).to_vec();
    let err = ingest_cases(File::open(fixture("cases.csv")).unwrap(), &labels, &IngestOptions::default()).unwrap_err();
    assert!(matches!(err, Error::UnknownRegion { line: 5, ref label } if label == "Gamma"), "{err}");
}
