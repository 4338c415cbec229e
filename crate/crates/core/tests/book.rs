use std::path::PathBuf;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn every_chapter_is_listed_and_tested() {
    let src = root().join("book/src");
    let summary = std::fs::read_to_string(src.join("SUMMARY.md")).unwrap();
    let lib = std::fs::read_to_string(root().join("crates/core/src/lib.rs")).unwrap();
    for entry in std::fs::read_dir(&src).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name == "SUMMARY.md" || !name.ends_with(".md") {
            continue;
        }
        assert!(summary.contains(&format!("({name})")), "{name} missing from SUMMARY.md");
        assert!(
            lib.contains(&format!("book/src/{name}\")")),
            "{name} not wired as a doctest"
        );
    }
}
