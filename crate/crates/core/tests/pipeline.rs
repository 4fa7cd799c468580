use std::collections::BTreeMap;

use pgen::data::{FieldValue, Sample};
use pgen::pipeline::{
    bpe_decode, bpe_train, build_vocab, collate, data_collate, BpeModel, FieldSpec, PipelineError, ProcessedSample,
    Tokenizer, BOS, EOS, PAD, UNK,
};

fn pair(a: &str, b: &str) -> (String, String) {
    (a.to_string(), b.to_string())
}

/// Adjacent symbol pairs over a character split with `</w>` on the last
/// symbol, counted by word frequency.
fn pair_counts(corpus: &str) -> BTreeMap<(String, String), usize> {
    let mut counts = BTreeMap::new();
    for word in corpus.split_whitespace() {
        let mut syms: Vec<String> = word.chars().map(String::from).collect();
        let last = syms.len() - 1;
        syms[last].push_str("</w>");
        for w in syms.windows(2) {
            *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += 1;
        }
    }
    counts
}

#[test]
fn first_merge_is_most_frequent_pair() {
    let corpus = "low low lower";
    let counts = pair_counts(corpus);
    let best = counts.values().max().unwrap();
    let expected = counts.iter().find(|(_, c)| *c == best).unwrap().0.clone();
    assert_eq!(expected, pair("l", "o"));
    let m = bpe_train([corpus], 1).unwrap();
    assert_eq!(m.merges(), [expected]);
}

#[test]
fn equal_counts_merge_smaller_pair_first() {
    // "ab" and "cd" each occur once
    let m = bpe_train(["cd ab"], 1).unwrap();
    assert_eq!(m.merges(), [pair("a", "b</w>")]);
}

#[test]
fn zero_merges_is_character_level() {
    let m = bpe_train(["abc"], 0).unwrap();
    assert_eq!(m.encode("ab"), ["a", "b</w>"]);
}

#[test]
fn merges_apply_in_order() {
    let m = BpeModel::from_merges(vec![pair("l", "o"), pair("lo", "w</w>")]);
    assert_eq!(m.encode("low"), ["low</w>"]);
    assert!(m.encode("").is_empty());
}

#[test]
fn encode_decode_round_trip() {
    let m = bpe_train(["new york new yorker"], 5).unwrap();
    assert_eq!(bpe_decode(&m.encode("new york")), "new york");
}

#[test]
fn decode_examples() {
    assert_eq!(bpe_decode(&["lo", "w</w>"]), "low");
    assert_eq!(bpe_decode::<&str>(&[]), "");
    assert_eq!(bpe_decode(&["a</w>", "b</w>"]), "a b");
}

#[test]
fn vocab_ordering_and_threshold() {
    let toks = ["a", "b", "a", "a"];
    let v = build_vocab(toks, 1);
    assert_eq!(v.len(), 7);
    assert_eq!((v.lookup("<pad>"), v.lookup("<unk>"), v.lookup("<s>"), v.lookup("</s>"), v.lookup("<mask>")), (0, 1, 2, 3, 4));
    assert_eq!((v.lookup("a"), v.lookup("b")), (5, 6));
    let v = build_vocab(toks, 2);
    assert!(!v.contains("b"));
    assert_eq!(v.lookup("b"), UNK);
    assert_eq!(build_vocab(Vec::<String>::new(), 1).len(), 5);
}

fn char_tokenizer() -> Tokenizer {
    Tokenizer::new(BpeModel::from_merges(Vec::new()), build_vocab(["a</w>", "b</w>"], 1))
}

#[test]
fn data_collate_adds_markers_on_target() {
    let tok = char_tokenizer();
    let s = Sample::new()
        .with("src", FieldValue::Str("a".into()))
        .with("tgt", FieldValue::Str("b".into()));
    let p = data_collate(s, &tok, &FieldSpec::training("src", "tgt")).unwrap();
    let (a, b) = (tok.vocab.lookup("a</w>"), tok.vocab.lookup("b</w>"));
    assert_eq!(p.src, [a]);
    assert_eq!(p.tgt, Some(vec![BOS, b, EOS]));
}

#[test]
fn unknown_pieces_become_unk() {
    let tok = char_tokenizer();
    assert_eq!(tok.encode("z"), [UNK]);
}

#[test]
fn missing_target_allowed_only_for_inference() {
    let tok = char_tokenizer();
    let s = Sample::new().with("src", FieldValue::Str("a".into()));
    let p = data_collate(s.clone(), &tok, &FieldSpec::inference("src", "tgt")).unwrap();
    assert!(p.tgt.is_none());
    assert!(matches!(
        data_collate(s, &tok, &FieldSpec::training("src", "tgt")),
        Err(PipelineError::MissingField(_))
    ));
}

#[test]
fn collate_pads_to_longest() {
    let b = collate(vec![ProcessedSample::new(vec![7, 8], None), ProcessedSample::new(vec![7, 8, 9], None)], PAD).unwrap();
    assert_eq!(b.src.cols, 3);
    assert_eq!(b.src.row(0), [7, 8, PAD]);
    assert_eq!(b.src.lengths, [2, 3]);

    let single = collate(vec![ProcessedSample::new(vec![5, 6], None)], PAD).unwrap();
    assert_eq!(single.src.data, [5, 6]);

    let same = collate(vec![ProcessedSample::new(vec![5, 6, 7], Some(vec![2, 5, 3])); 4], PAD).unwrap();
    for r in 1..4 {
        assert_eq!(same.src.row(r), same.src.row(0));
        assert_eq!(same.tgt.as_ref().unwrap().row(r), same.tgt.as_ref().unwrap().row(0));
    }
}

#[test]
fn offline_processing_once_equals_per_epoch() {
    let tok = Tokenizer::new(
        BpeModel::from_merges(vec![pair("a", "b")]),
        build_vocab(["ab", "a</w>", "b</w>", "c</w>", "ab</w>"], 1),
    );
    let raw: Vec<Sample> = ["ab a", "c ab", "b b b", "abc"]
        .iter()
        .map(|t| Sample::new().with("src", FieldValue::Str(t.to_string())).with("tgt", FieldValue::Str(t.to_string())))
        .collect();
    let spec = FieldSpec::training("src", "tgt");
    let once: Vec<ProcessedSample> = raw.iter().map(|s| data_collate(s.clone(), &tok, &spec).unwrap()).collect();
    let plans = [vec![vec![0, 1], vec![2, 3]], vec![vec![3, 1], vec![0, 2]]];
    for plan in plans {
        for idx in plan {
            let cached = collate(idx.iter().map(|&i| once[i].clone()).collect(), PAD).unwrap();
            let fresh = collate(
                idx.iter().map(|&i| data_collate(raw[i].clone(), &tok, &spec).unwrap()).collect(),
                PAD,
            )
            .unwrap();
            assert_eq!(cached.src, fresh.src);
            assert_eq!(cached.tgt, fresh.tgt);
        }
    }
}
