use std::process::Command;

/// Bakes the current commit id into the binary so run manifests can say
/// which build produced them. Falls back to "unknown" outside a checkout.
fn main() {
    let id = Command::new("git")
        .args(["rev-parse", "--short=12", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into());
    println!("cargo:rustc-env=HYVIC_BUILD_ID={id}");
}
