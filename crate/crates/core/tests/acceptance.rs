//! Runs every acceptance criterion and prints one line per criterion.
//! Built without the libtest harness so the lines always reach the output.

fn main() {
    let filter = std::env::var("DNA_ACCEPTANCE_FILTER").ok();
    let reports = dna_core::verify::run(filter.as_deref(), |r| println!("{}", r.line())).expect("valid filter");
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    println!(
        "acceptance: {} passed, {} failed",
        reports.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
