//! The line-delimited trace format shared with external exporters.

use std::io::Write;

use cover_decode::{load_traces, save_traces, Error, ScoreTrace, Token};

fn file(contents: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    f
}

#[test]
fn three_line_file_loads() {
    let f = file(concat!(
        r#"{"id":"q0","tokens":[3,1,0],"prefix_scores":[0.5,0.25,0.125]}"#,
        "\n",
        r#"{"id":"q1","tokens":[2],"prefix_scores":[0.9]}"#,
        "\n\n",
        r#"{"id":"q2","tokens":[],"prefix_scores":[]}"#,
        "\n",
    ));
    let traces = load_traces(f.path()).unwrap();
    assert_eq!(traces.len(), 3);
    assert_eq!(traces[0].id, "q0");
    assert_eq!(traces[0].tokens, vec![Token(3), Token(1), Token(0)]);
    assert_eq!(traces[0].score_at(2), 0.25);
    assert!(traces[2].is_empty());
}

#[test]
fn length_mismatch_names_the_trace() {
    let f = file(concat!(
        r#"{"id":"ok","tokens":[1],"prefix_scores":[0.5]}"#,
        "\n",
        r#"{"id":"broken-7","tokens":[1,2],"prefix_scores":[0.5]}"#,
        "\n"
    ));
    let err = load_traces(f.path()).unwrap_err();
    assert!(matches!(&err, Error::Validation { id, .. } if id == "broken-7"), "{err}");
    assert!(err.to_string().contains("broken-7"));
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let f = file("");
    assert!(load_traces(f.path()).unwrap().is_empty());
}

#[test]
fn parse_errors_carry_line_numbers() {
    let f = file(concat!(r#"{"id":"a","tokens":[],"prefix_scores":[]}"#, "\n", "{not json\n"));
    match load_traces(f.path()).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn missing_field_and_bad_token_are_rejected() {
    let f = file(r#"{"id":"a","tokens":[1]}"#);
    assert!(matches!(load_traces(f.path()), Err(Error::Parse { line: 1, .. })));
    let f = file(r#"{"id":"a","tokens":[-1],"prefix_scores":[0.1]}"#);
    assert!(matches!(load_traces(f.path()), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn duplicate_ids_are_rejected() {
    let line = r#"{"id":"x","tokens":[0],"prefix_scores":[0.1]}"#;
    let f = file(&format!("{line}\n{line}\n"));
    assert!(matches!(load_traces(f.path()), Err(Error::DuplicateId(id)) if id == "x"));
}

#[test]
fn save_then_load_is_lossless() {
    let traces = vec![
        ScoreTrace::new("a", vec![Token(0), Token(9)], vec![0.1 + 0.2, 1e-300]).unwrap(),
        ScoreTrace::new("b", vec![], vec![]).unwrap(),
    ];
    let f = tempfile::NamedTempFile::new().unwrap();
    save_traces(f.path(), &traces).unwrap();
    assert_eq!(load_traces(f.path()).unwrap(), traces);
    let text = std::fs::read_to_string(f.path()).unwrap();
    assert_eq!(text.lines().count(), 2);
}
