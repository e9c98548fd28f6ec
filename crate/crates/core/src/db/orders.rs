use std::fmt;
use std::path::{Component, Path};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::runner::PreprocessingSpec;
use crate::time::{DateRange, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OrderStatus {
    Pending,
    Started,
    Preprocessing,
    Completed,
    Failed,
}

impl OrderStatus {
    pub const ALL: [OrderStatus; 5] = [
        OrderStatus::Pending,
        OrderStatus::Started,
        OrderStatus::Preprocessing,
        OrderStatus::Completed,
        OrderStatus::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OrderStatus::Pending => "PENDING",
            OrderStatus::Started => "STARTED",
            OrderStatus::Preprocessing => "PREPROCESSING",
            OrderStatus::Completed => "COMPLETED",
            OrderStatus::Failed => "FAILED",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, OrderStatus::Completed | OrderStatus::Failed)
    }

    /// Edges of the order lifecycle graph.
    pub fn can_transition_to(self, next: OrderStatus) -> bool {
        use OrderStatus::*;
        matches!(
            (self, next),
            (Pending, Started)
                | (Started, Preprocessing)
                | (Started, Completed)
                | (Started, Failed)
                | (Preprocessing, Completed)
                | (Preprocessing, Failed)
        )
    }
}

impl fmt::Display for OrderStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown order status {0:?}")]
pub struct ParseStatusError(pub String);

impl FromStr for OrderStatus {
    type Err = ParseStatusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OrderStatus::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ParseStatusError(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DestinationType {
    Dataset,
    Screen,
}

impl DestinationType {
    pub fn as_str(self) -> &'static str {
        match self {
            DestinationType::Dataset => "Dataset",
            DestinationType::Screen => "Screen",
        }
    }
}

impl fmt::Display for DestinationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DestinationType {
    type Err = ParseStatusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Dataset" => Ok(DestinationType::Dataset),
            "Screen" => Ok(DestinationType::Screen),
            other => Err(ParseStatusError(other.to_string())),
        }
    }
}

/// Import request as submitted by a user; the store assigns identity,
/// status and timestamps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewOrder {
    pub group: String,
    pub username: String,
    pub destination_id: u64,
    pub destination_type: DestinationType,
    pub files: Vec<String>,
    #[serde(default)]
    pub preprocessing: Option<PreprocessingSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportOrder {
    pub uuid: String,
    pub group: String,
    pub username: String,
    pub destination_id: u64,
    pub destination_type: DestinationType,
    pub files: Vec<String>,
    pub file_names: Vec<String>,
    pub preprocessing: Option<PreprocessingSpec>,
    pub status: OrderStatus,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    pub error_message: Option<String>,
}

impl ImportOrder {
    /// Whole seconds between creation and the last status change.
    pub fn elapsed_seconds(&self) -> i64 {
        self.updated_at.seconds_since(&self.created_at)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderFilter {
    pub status: Option<OrderStatus>,
    pub group: Option<String>,
    pub date_range: Option<DateRange>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupMapping {
    pub group: String,
    pub subfolder: String,
}

/// Last component of a remote-relative path.
pub fn basename(path: &str) -> String {
    Path::new(path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// True when `path` is a relative path strictly below `subfolder` with no
/// parent-directory components.
pub fn is_under_subfolder(path: &str, subfolder: &str) -> bool {
    let mut components = Path::new(path).components();
    match components.next() {
        Some(Component::Normal(first)) if first == subfolder => {}
        _ => return false,
    }
    let mut depth = 0;
    for c in components {
        match c {
            Component::Normal(_) => depth += 1,
            Component::CurDir => {}
            _ => return false,
        }
    }
    depth > 0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_graph_adjacency() {
        use OrderStatus::*;
        let edges: Vec<_> = OrderStatus::ALL
            .iter()
            .flat_map(|a| OrderStatus::ALL.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_transition_to(*b))
            .collect();
        assert_eq!(
            edges,
            vec![
                (Pending, Started),
                (Started, Preprocessing),
                (Started, Completed),
                (Started, Failed),
                (Preprocessing, Completed),
                (Preprocessing, Failed)
            ]
        );
    }

    #[test]
    fn status_serializes_upper_case() {
        assert_eq!(serde_json::to_string(&OrderStatus::Preprocessing).unwrap(), "\"PREPROCESSING\"");
        assert_eq!("completed".parse::<OrderStatus>().unwrap(), OrderStatus::Completed);
    }

    #[test]
    fn subfolder_containment() {
        assert!(is_under_subfolder("coreReits/.../a.czi", "coreReits"));
        assert!(is_under_subfolder("coreReits/x/y.tif", "coreReits"));
        assert!(!is_under_subfolder("coreReits", "coreReits"));
        assert!(!is_under_subfolder("coreReits/../coreKrawczyk/x.tif", "coreReits"));
        assert!(!is_under_subfolder("/coreReits/x.tif", "coreReits"));
        assert!(!is_under_subfolder("coreReitsX/x.tif", "coreReits"));
    }

    #[test]
    fn basename_of_remote_path() {
        assert_eq!(basename("coreReits/a/18-CRO-20 Heufl spinal cord.czi"), "18-CRO-20 Heufl spinal cord.czi");
    }
}
