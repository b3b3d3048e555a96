//! Removal of segments left behind by launchers that died.

use shmpi_core::segment::{list_job_segments, unlink_segment};

/// The launcher process id embedded in a segment name, if any.
fn owner_pid(name: &str) -> Option<u32> {
    name.trim_start_matches("shmpi.")
        .split('-')
        .find(|t| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|t| t.parse().ok())
}

fn alive(pid: u32) -> bool {
    std::path::Path::new(&format!("/proc/{pid}")).exists()
}

/// Unlinks job segments whose launcher is gone, or all of them with
/// `force`. Returns the removed names.
pub fn clean_segments(force: bool) -> Vec<String> {
    list_job_segments()
        .into_iter()
        .filter(|name| force || !owner_pid(name).is_some_and(alive))
        .filter(|name| matches!(unlink_segment(name), Ok(true)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pid_is_first_numeric_token() {
        assert_eq!(owner_pid("shmpi.4312-0-00ab12cd"), Some(4312));
        assert_eq!(owner_pid("shmpi.local-77-3"), Some(77));
        assert_eq!(owner_pid("shmpi.manual"), None);
    }
}
