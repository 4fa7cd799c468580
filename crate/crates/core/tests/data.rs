use pgen::data::{
    jsonl_parser, load_jsonl, load_parallel, load_text, stream_open, text_parser, tsv_parser, DataError, FieldValue,
    ResidencyProbe, Sample, SampleStream,
};

fn file_with(dir: &tempfile::TempDir, name: &str, content: &str) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, content).unwrap();
    p.to_str().unwrap().to_string()
}

fn drain(s: &mut dyn SampleStream) -> Vec<Sample> {
    let mut out = Vec::new();
    while let Some(x) = s.next_sample().unwrap() {
        out.push(x);
    }
    out
}

#[test]
fn parallel_files_pair_up_by_line() {
    let dir = tempfile::tempdir().unwrap();
    let src = file_with(&dir, "s", "ab\ncd\n");
    let tgt = file_with(&dir, "t", "AB\nCD\n");
    let ds = load_parallel(&src, &tgt, "src", "tgt").unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds[0].text("src").unwrap(), "ab");
    assert_eq!(ds[0].text("tgt").unwrap(), "AB");
    assert_eq!(ds[1].text("tgt").unwrap(), "CD");
}

#[test]
fn parallel_length_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let src = file_with(&dir, "s", "a\nb\n");
    let tgt = file_with(&dir, "t", "A\nB\nC\n");
    assert!(matches!(
        load_parallel(&src, &tgt, "src", "tgt"),
        Err(DataError::LengthMismatch { src: 2, tgt: 3 })
    ));
}

#[test]
fn empty_parallel_files_give_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let src = file_with(&dir, "s", "");
    let tgt = file_with(&dir, "t", "");
    assert!(load_parallel(&src, &tgt, "src", "tgt").unwrap().is_empty());
}

#[test]
fn jsonl_flat_objects() {
    let dir = tempfile::tempdir().unwrap();
    let uri = file_with(&dir, "d.jsonl", "{\"text\":\"hi\",\"label\":1}\n");
    let ds = load_jsonl(&uri).unwrap();
    assert_eq!(ds[0].get("text"), Some(&FieldValue::Str("hi".into())));
    assert_eq!(ds[0].get("label"), Some(&FieldValue::Int(1)));
}

#[test]
fn jsonl_malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let uri = file_with(&dir, "d.jsonl", "{\"a\":1}\n{\"a\":2}\n{oops\n");
    assert_eq!(load_jsonl(&uri).unwrap_err().line(), Some(3));
}

#[test]
fn jsonl_nested_object_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let uri = file_with(&dir, "d.jsonl", "{\"a\":{\"b\":1}}\n");
    assert!(matches!(load_jsonl(&uri), Err(DataError::Parse { line: 1, .. })));
}

#[test]
fn stream_ends_and_stays_ended() {
    let dir = tempfile::tempdir().unwrap();
    let uri = file_with(&dir, "t", "s1\ns2\ns3\n");
    let mut s = stream_open(&uri, text_parser("src")).unwrap();
    for want in ["s1", "s2", "s3"] {
        assert_eq!(s.next_sample().unwrap().unwrap().text("src").unwrap(), want);
    }
    assert!(s.next_sample().unwrap().is_none());
    assert!(s.next_sample().unwrap().is_none());
}

#[test]
fn reset_mid_file_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let uri = file_with(&dir, "t", "s1\ns2\ns3\n");
    let mut s = stream_open(&uri, text_parser("src")).unwrap();
    s.next_sample().unwrap();
    s.next_sample().unwrap();
    s.reset().unwrap();
    assert_eq!(s.next_sample().unwrap().unwrap().text("src").unwrap(), "s1");
}

#[test]
fn parse_failure_is_recoverable() {
    let dir = tempfile::tempdir().unwrap();
    let uri = file_with(&dir, "t.tsv", "a\tA\nbroken\nc\tC\n");
    let mut s = stream_open(&uri, tsv_parser("src", "tgt")).unwrap();
    assert_eq!(s.next_sample().unwrap().unwrap().text("src").unwrap(), "a");
    assert_eq!(s.next_sample().unwrap_err().line(), Some(2));
    assert_eq!(s.next_sample().unwrap().unwrap().text("src").unwrap(), "c");
    assert!(s.next_sample().unwrap().is_none());
}

#[test]
fn streaming_equals_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = (0..500).map(|i| format!("line {i} {}\n", "w ".repeat(i % 7))).collect();
    let uri = file_with(&dir, "t", &text);
    let mut s = stream_open(&uri, text_parser("src")).unwrap();
    assert_eq!(drain(&mut s), load_text(&uri, "src").unwrap());

    let jl: String = (0..50).map(|i| format!("{{\"x\":{i},\"s\":\"v{i}\"}}\n")).collect();
    let uri = file_with(&dir, "j", &jl);
    let mut s = stream_open(&uri, jsonl_parser()).unwrap();
    assert_eq!(drain(&mut s), load_jsonl(&uri).unwrap());
}

#[test]
fn one_sample_resident_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = (0..1_000_000).map(|i| format!("{i}\n")).collect();
    let uri = file_with(&dir, "big", &text);
    let probe = ResidencyProbe::new();
    let mut s = stream_open(&uri, text_parser("src")).unwrap().with_probe(probe.clone());
    let mut n = 0;
    while let Some(x) = s.next_sample().unwrap() {
        drop(x);
        n += 1;
    }
    assert_eq!(n, 1_000_000);
    assert_eq!(probe.peak(), 1);
    assert_eq!(probe.current(), 0);
}
