//! Unified-diff parsing and rendering.
//!
//! Hunks are consumed by the line counts declared in their `@@` header, so a
//! removed line whose text starts with `--` is never confused with a `---`
//! file header.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One added or removed line, indexed per file and per side from 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffLine {
    pub index: usize,
    pub text: String,
}

/// Changed lines of a single file within a commit.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChange {
    pub path: String,
    pub added_lines: Vec<DiffLine>,
    pub removed_lines: Vec<DiffLine>,
}

impl FileChange {
    pub fn new(path: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            ..Self::default()
        }
    }

    pub fn churn(&self) -> usize {
        self.added_lines.len() + self.removed_lines.len()
    }

    fn push_added(&mut self, text: &str) {
        let index = self.added_lines.len();
        self.added_lines.push(DiffLine {
            index,
            text: text.to_string(),
        });
    }

    fn push_removed(&mut self, text: &str) {
        let index = self.removed_lines.len();
        self.removed_lines.push(DiffLine {
            index,
            text: text.to_string(),
        });
    }
}

#[derive(Clone, Copy, Debug)]
struct HunkHeader {
    old_count: usize,
    new_count: usize,
}

fn parse_range(range: &str) -> Option<usize> {
    // "start" or "start,count"; a missing count means 1
    let mut parts = range.splitn(2, ',');
    parts.next()?.parse::<usize>().ok()?;
    match parts.next() {
        Some(count) => count.parse().ok(),
        None => Some(1),
    }
}

fn parse_hunk_header(line: &str) -> Option<HunkHeader> {
    let rest = line.strip_prefix("@@ ")?;
    let end = rest.find(" @@")?;
    let mut ranges = rest[..end].split_whitespace();
    let old = ranges.next()?.strip_prefix('-')?;
    let new = ranges.next()?.strip_prefix('+')?;
    if ranges.next().is_some() {
        return None;
    }
    Some(HunkHeader {
        old_count: parse_range(old)?,
        new_count: parse_range(new)?,
    })
}

fn header_path(raw: &str) -> Option<String> {
    let raw = raw.split('\t').next().unwrap_or(raw).trim_end();
    if raw == "/dev/null" {
        return None;
    }
    let stripped = raw
        .strip_prefix("a/")
        .or_else(|| raw.strip_prefix("b/"))
        .unwrap_or(raw);
    Some(stripped.to_string())
}

fn git_header_path(rest: &str) -> String {
    // "a/<path> b/<path>": take the b-side
    match rest.rfind(" b/") {
        Some(pos) => rest[pos + 3..].to_string(),
        None => rest.to_string(),
    }
}

#[derive(Default)]
struct DiffParser {
    files: Vec<FileChange>,
    current: Option<FileChange>,
    // set between `diff --git` and the first hunk of that file
    header_open: bool,
    binary: bool,
    old_remaining: usize,
    new_remaining: usize,
}

impl DiffParser {
    fn finish_file(&mut self) {
        if let Some(file) = self.current.take() {
            if self.binary {
                log::warn!("skipping binary diff for {}", file.path);
            } else {
                self.files.push(file);
            }
        }
        self.binary = false;
        self.header_open = false;
    }

    fn start_file(&mut self, path: String) {
        self.finish_file();
        self.current = Some(FileChange::new(path));
        self.header_open = true;
    }

    fn in_hunk(&self) -> bool {
        self.old_remaining > 0 || self.new_remaining > 0
    }

    fn hunk_line(&mut self, lineno: usize, line: &str) -> Result<()> {
        let err = |message: &str| Error::Diff {
            line: lineno,
            message: message.to_string(),
        };
        let file = self.current.as_mut().expect("hunk without file");
        match line.as_bytes().first() {
            Some(b'+') => {
                self.new_remaining = self
                    .new_remaining
                    .checked_sub(1)
                    .ok_or_else(|| err("more added lines than the hunk header declares"))?;
                file.push_added(&line[1..]);
            }
            Some(b'-') => {
                self.old_remaining = self
                    .old_remaining
                    .checked_sub(1)
                    .ok_or_else(|| err("more removed lines than the hunk header declares"))?;
                file.push_removed(&line[1..]);
            }
            Some(b' ') | None => {
                if self.old_remaining == 0 || self.new_remaining == 0 {
                    return Err(err("more context lines than the hunk header declares"));
                }
                self.old_remaining -= 1;
                self.new_remaining -= 1;
            }
            Some(b'\\') => {}
            Some(_) => return Err(err("unexpected line inside hunk")),
        }
        Ok(())
    }

    fn feed(&mut self, lineno: usize, line: &str) -> Result<()> {
        if self.in_hunk() && !line.starts_with('\\') {
            return self.hunk_line(lineno, line);
        }
        if let Some(rest) = line.strip_prefix("diff --git ") {
            self.start_file(git_header_path(rest));
        } else if let Some(rest) = line.strip_prefix("--- ") {
            if !self.header_open {
                self.start_file(header_path(rest).unwrap_or_default());
            } else if let (Some(file), Some(path)) = (self.current.as_mut(), header_path(rest)) {
                file.path = path;
            }
        } else if let Some(rest) = line.strip_prefix("+++ ") {
            if self.current.is_none() {
                self.start_file(String::new());
            }
            if let (Some(file), Some(path)) = (self.current.as_mut(), header_path(rest)) {
                file.path = path;
            }
        } else if line.starts_with("@@") {
            let header = parse_hunk_header(line).ok_or_else(|| Error::Diff {
                line: lineno,
                message: format!("malformed hunk header `{line}`"),
            })?;
            if self.current.is_none() {
                self.start_file(String::new());
            }
            self.header_open = false;
            self.old_remaining = header.old_count;
            self.new_remaining = header.new_count;
        } else if line.starts_with("Binary files ") || line.starts_with("GIT binary patch") {
            self.binary = true;
        }
        // anything else (index, mode, rename lines) carries no changed text
        Ok(())
    }
}

/// Parses a unified diff into per-file added and removed lines.
///
/// Context lines are dropped. Added and removed lines are indexed from 0
/// within each file. Binary file sections are skipped with a warning.
pub fn parse_unified_diff(text: &str) -> Result<Vec<FileChange>> {
    let mut parser = DiffParser::default();
    let mut last = 0;
    for (i, line) in text.lines().enumerate() {
        last = i + 1;
        parser.feed(i + 1, line)?;
    }
    if parser.in_hunk() {
        return Err(Error::Diff {
            line: last,
            message: "diff ends inside a hunk".to_string(),
        });
    }
    parser.finish_file();
    Ok(parser.files)
}

/// Renders file changes as a unified diff that [`parse_unified_diff`] reads back.
///
/// Each file becomes a single hunk with removed lines before added lines.
pub fn render_unified_diff(files: &[FileChange]) -> String {
    let mut out = String::new();
    for file in files {
        out.push_str(&format!("diff --git a/{0} b/{0}\n", file.path));
        out.push_str(&format!("--- a/{}\n+++ b/{}\n", file.path, file.path));
        let removed = file.removed_lines.len();
        let added = file.added_lines.len();
        if removed == 0 && added == 0 {
            continue;
        }
        out.push_str(&format!("@@ -1,{removed} +1,{added} @@\n"));
        for line in &file.removed_lines {
            out.push('-');
            out.push_str(&line.text);
            out.push('\n');
        }
        for line in &file.added_lines {
            out.push('+');
            out.push_str(&line.text);
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(lines: &[DiffLine]) -> Vec<(usize, &str)> {
        lines.iter().map(|l| (l.index, l.text.as_str())).collect()
    }

    #[test]
    fn single_hunk_splits_added_and_removed() {
        let diff = "--- a/f.c\n+++ b/f.c\n@@ -1,2 +1,2 @@\n+a\n-b\n c\n";
        let files = parse_unified_diff(diff).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(files[0].path, "f.c");
        assert_eq!(texts(&files[0].added_lines), vec![(0, "a")]);
        assert_eq!(texts(&files[0].removed_lines), vec![(0, "b")]);
    }

    #[test]
    fn context_only_diff_has_no_changed_lines() {
        let diff = "--- a/f\n+++ b/f\n@@ -1,2 +1,2 @@\n x\n y\n";
        let files = parse_unified_diff(diff).unwrap();
        assert_eq!(files.len(), 1);
        assert!(files[0].added_lines.is_empty());
        assert!(files[0].removed_lines.is_empty());
    }

    #[test]
    fn indices_restart_per_file() {
        let diff = "\
diff --git a/one.py b/one.py
index 111..222 100644
--- a/one.py
+++ b/one.py
@@ -1,2 +1,2 @@
-x = 1
+x = 2
 ctx
@@ -10,1 +10,2 @@
 ctx
+y = 3
diff --git a/two.py b/two.py
--- a/two.py
+++ b/two.py
@@ -1 +1 @@
-old
+new
@@ -5,2 +5,1 @@
-gone
 keep
";
        let files = parse_unified_diff(diff).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(
            texts(&files[0].added_lines),
            vec![(0, "x = 2"), (1, "y = 3")]
        );
        assert_eq!(texts(&files[0].removed_lines), vec![(0, "x = 1")]);
        assert_eq!(files[1].path, "two.py");
        assert_eq!(texts(&files[1].added_lines), vec![(0, "new")]);
        assert_eq!(
            texts(&files[1].removed_lines),
            vec![(0, "old"), (1, "gone")]
        );
    }

    #[test]
    fn removed_line_starting_with_dashes_stays_in_hunk() {
        let diff = "--- a/q.sql\n+++ b/q.sql\n@@ -1,1 +1,1 @@\n--- comment\n+++ counter\n";
        let files = parse_unified_diff(diff).unwrap();
        assert_eq!(texts(&files[0].removed_lines), vec![(0, "-- comment")]);
        assert_eq!(texts(&files[0].added_lines), vec![(0, "++ counter")]);
    }

    #[test]
    fn malformed_hunk_header_is_rejected() {
        let diff = "--- a/f\n+++ b/f\n@@ -x +1 @@\n+a\n";
        assert!(matches!(
            parse_unified_diff(diff),
            Err(Error::Diff { line: 3, .. })
        ));
    }

    #[test]
    fn truncated_hunk_is_rejected() {
        let diff = "--- a/f\n+++ b/f\n@@ -1,3 +1,3 @@\n+a\n";
        assert!(parse_unified_diff(diff).is_err());
    }

    #[test]
    fn binary_sections_are_skipped() {
        let diff = "\
diff --git a/img.png b/img.png
Binary files a/img.png and b/img.png differ
diff --git a/t.txt b/t.txt
--- a/t.txt
+++ b/t.txt
@@ -0,0 +1 @@
+hello
";
        let files = parse_unified_diff(diff).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(files[0].path, "t.txt");
    }

    #[test]
    fn new_and_deleted_files_keep_their_path() {
        let diff = "--- /dev/null\n+++ b/new.rs\n@@ -0,0 +1 @@\n+fn a() {}\n--- a/old.rs\n+++ /dev/null\n@@ -1 +0,0 @@\n-fn b() {}\n";
        let files = parse_unified_diff(diff).unwrap();
        assert_eq!(files[0].path, "new.rs");
        assert_eq!(files[1].path, "old.rs");
        assert_eq!(files[1].removed_lines.len(), 1);
    }

    #[test]
    fn no_newline_marker_is_ignored() {
        let diff = "--- a/f\n+++ b/f\n@@ -1 +1 @@\n-a\n\\ No newline at end of file\n+b\n\\ No newline at end of file\n";
        let files = parse_unified_diff(diff).unwrap();
        assert_eq!(files[0].churn(), 2);
    }
}
