//! Home of the `acceptance` test target. Run it with
//! `cargo test -p covloc-validation --test acceptance`; pass criterion names
//! as arguments to run a subset.
