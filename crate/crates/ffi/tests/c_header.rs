//! Compiles a C program against the generated header and links it to the
//! static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "spankl.h"

int main(void) {
    SpanklModel *m = NULL;
    enum SpanklStatus st = spankl_model_load("/nonexistent/model", &m);
    if (st != SPANKL_STATUS_IO || m != NULL) return 10;
    char *msg = spankl_last_error_message();
    if (msg == NULL || strstr(msg, "/nonexistent/model") == NULL) return 11;
    spankl_string_free(msg);
    if (spankl_model_load(NULL, &m) != SPANKL_STATUS_NULL_POINTER) return 12;
    printf("%s\n", spankl_version());
    return 0;
}
"#;

#[test]
fn header_compiles_and_links() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("spankl.h").is_file());
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libspankl_ffi.a");
    assert!(lib.is_file(), "static library not found at {}", lib.display());

    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    let exe = tmp.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("run cc");
    assert!(status.success(), "cc failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
