use std::path::Path;
use std::process::{Command, Output};

fn cassandra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cassandra"))
        .args(args)
        .output()
        .expect("run cassandra")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = cassandra(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Deterministic BF16 tensor file with a spread of magnitudes and signs.
fn write_bf16(path: &Path, rows: u32, cols: u32) -> Vec<u8> {
    let mut bytes = b"BF16".to_vec();
    bytes.push(2);
    bytes.extend_from_slice(&rows.to_le_bytes());
    bytes.extend_from_slice(&cols.to_le_bytes());
    let mut x = 0x9E37_79B9u32;
    for _ in 0..rows * cols {
        x ^= x << 13;
        x ^= x >> 17;
        x ^= x << 5;
        let sign = (x & 1) << 15;
        let exp = 112 + (x >> 8) % 16;
        let bits = sign | (exp << 7) | ((x >> 16) & 0x7F);
        bytes.extend_from_slice(&(bits as u16).to_le_bytes());
    }
    std::fs::write(path, &bytes).unwrap();
    bytes
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
        .unwrap_or_else(|| panic!("no `{key}` in:\n{text}"))
}

#[test]
fn mode1_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.bf16");
    let cass = dir.path().join("w.cass");
    let out = dir.path().join("out.bf16");
    let original = write_bf16(&input, 24, 40);
    let report = ok(&["encode", p(&input), "-o", p(&cass)]);
    assert_eq!(field(&report, "kept"), "576");
    assert!(dir.path().join("w.cass.manifest").exists());
    ok(&["decode", p(&cass), "-o", p(&out), "--view", "target"]);
    assert_eq!(std::fs::read(&out).unwrap(), original);
}

#[test]
fn mode2_is_flagged_by_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.bf16");
    let cass = dir.path().join("w.cass");
    write_bf16(&input, 8, 64);
    ok(&["encode", p(&input), "-o", p(&cass), "--mode", "2"]);
    let info = ok(&["inspect", p(&cass)]);
    assert!(field(&info, "mode").starts_with("2 (MX"), "{info}");
}

#[test]
fn inspect_sections_sum_to_file_minus_header() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.bf16");
    write_bf16(&input, 32, 48);
    for packed in [false, true] {
        let cass = dir.path().join(format!("w{packed}.cass"));
        let mut args = vec!["encode", p(&input), "-o", p(&cass), "--prune", "0.3", "--truncate", "2"];
        if packed {
            args.extend(["--superblock", "4"]);
        }
        ok(&args);
        let info = ok(&["inspect", p(&cass)]);
        let header: usize = field(&info, "header_bytes").parse().unwrap();
        let file: usize = field(&info, "file_bytes").parse().unwrap();
        let sections: usize = info
            .lines()
            .filter_map(|l| l.strip_prefix("section "))
            .map(|l| l.split(": ").nth(1).unwrap().split(' ').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(file, std::fs::metadata(&cass).unwrap().len() as usize);
        assert_eq!(sections, file - header);
        assert_eq!(info.contains("section packed"), packed);
    }
}

#[test]
fn draft_view_is_subset_of_target() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.bf16");
    let cass = dir.path().join("w.cass");
    let draft = dir.path().join("d.bf16");
    let target = dir.path().join("t.bf16");
    write_bf16(&input, 16, 32);
    ok(&["encode", p(&input), "-o", p(&cass), "--prune", "0.5", "--truncate", "4"]);
    ok(&["decode", p(&cass), "-o", p(&draft), "--view", "draft"]);
    ok(&["decode", p(&cass), "-o", p(&target)]);
    let d = std::fs::read(&draft).unwrap();
    let t = std::fs::read(&target).unwrap();
    assert_eq!(d[..13], t[..13]);
    let (mut zeros, mut truncated) = (0, 0);
    for (dc, tc) in d[13..].chunks(2).zip(t[13..].chunks(2)) {
        let dv = u16::from_le_bytes([dc[0], dc[1]]);
        let tv = u16::from_le_bytes([tc[0], tc[1]]);
        if dv == 0 {
            zeros += 1;
        } else {
            assert_eq!(dv, tv & !0xF);
            truncated += 1;
        }
    }
    assert_eq!(zeros, 256);
    assert_eq!(truncated, 256);
}

#[test]
fn simulate_is_deterministic_and_lossless_in_greedy_mode1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = ["simulate", "--seed", "7", "--max-tokens", "24", "--num-prompts", "2"];
    let first = ok(&[&args[..], &["--out", p(&out)]].concat());
    assert!(first.contains("lossless: outputs match baseline = true"), "{first}");
    let manifest = out.join("manifest.txt");
    let again = ok(&["simulate", "--manifest", p(&manifest)]);
    assert_eq!(first, again);
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(first.starts_with(&report));
    let tokens = std::fs::read_to_string(out.join("tokens.txt")).unwrap();
    assert_eq!(tokens.lines().count(), 2);
    assert!(tokens.lines().all(|l| l.split(' ').count() == 24));
}

#[test]
fn simulate_sampled_is_deterministic() {
    let args = [
        "simulate",
        "--sampling",
        "sampled",
        "--temperature",
        "0.8",
        "--max-tokens",
        "16",
        "--num-prompts",
        "2",
        "--mode",
        "2",
    ];
    assert_eq!(ok(&args), ok(&args));
}

#[test]
fn degenerate_config_accepts_everything() {
    let out = ok(&["simulate", "--prune", "0", "--truncate", "0", "--max-tokens", "16", "--num-prompts", "2"]);
    assert_eq!(field(&out, "alpha"), "1.000000");
}

#[test]
fn prompt_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = dir.path().join("p.txt");
    std::fs::write(&prompts, "1 2 3\n4 5\n").unwrap();
    let out = ok(&["simulate", "--prompts", p(&prompts), "--max-tokens", "8"]);
    assert_eq!(field(&out, "prompts"), "2");
    std::fs::write(&prompts, "1 99\n").unwrap();
    assert_eq!(cassandra(&["simulate", "--prompts", p(&prompts)]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cass");
    assert_eq!(cassandra(&["inspect", p(&missing)]).status.code(), Some(2));
    assert_eq!(cassandra(&["encode"]).status.code(), Some(2));
    assert_eq!(cassandra(&["simulate", "--mode", "3"]).status.code(), Some(2));
    assert_eq!(cassandra(&["simulate", "--prune", "1.5"]).status.code(), Some(2));

    let input = dir.path().join("w.bf16");
    let cass = dir.path().join("w.cass");
    write_bf16(&input, 8, 16);
    ok(&["encode", p(&input), "-o", p(&cass)]);
    let mut bytes = std::fs::read(&cass).unwrap();
    let bad = dir.path().join("bad.cass");
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(cassandra(&["inspect", p(&bad)]).status.code(), Some(3));
    assert_eq!(cassandra(&["decode", p(&bad), "-o", p(&input)]).status.code(), Some(3));
    std::fs::write(&bad, b"NOPE....").unwrap();
    assert_eq!(cassandra(&["inspect", p(&bad)]).status.code(), Some(3));

    let nan = dir.path().join("nan.f32");
    let mut f = b"F32 ".to_vec();
    f.push(1);
    f.extend_from_slice(&2u32.to_le_bytes());
    f.extend_from_slice(&1.0f32.to_le_bytes());
    f.extend_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&nan, f).unwrap();
    assert_eq!(cassandra(&["encode", p(&nan), "-o", p(&cass)]).status.code(), Some(2));
}

#[test]
fn entropy_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.bf16");
    write_bf16(&input, 8, 32);
    let e = ok(&["entropy", p(&input)]);
    assert_eq!(e.lines().count(), 3);
    assert!(e.starts_with("tensor\tnumel\tentropy\tavg_unary_bits\n"));
    let model = ok(&["entropy"]);
    assert!(model.lines().last().unwrap().starts_with("all\t"));

    let table = dir.path().join("sweep.tsv");
    let s = ok(&["sweep", "--max-tokens", "4", "--num-prompts", "1", "--out", p(&table)]);
    assert_eq!(std::fs::read_to_string(&table).unwrap(), s);
    assert!(dir.path().join("sweep.tsv.manifest").exists());
    assert!(s.lines().nth(1).unwrap().starts_with("none\t0.0\t0\t1.0000"));
}

#[test]
fn gridsearch_prints_full_grid_and_argmax() {
    let out = ok(&["gridsearch", "--max-tokens", "2", "--num-prompts", "1", "--prompt-len", "4"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1 + 576 + 1);
    assert_eq!(lines[1..577].iter().filter(|l| l.ends_with('*')).count(), 1);
    assert!(lines[577].starts_with("best: "));
}
