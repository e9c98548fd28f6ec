use serde::{Deserialize, Serialize};

/// Who is acting: used for ownership of orders, runs and imported objects.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Principal {
    pub username: String,
    #[serde(default)]
    pub display_name: Option<String>,
    pub group: String,
    #[serde(default)]
    pub user_id: i64,
    #[serde(default)]
    pub group_id: i64,
    #[serde(default)]
    pub is_admin: bool,
}

impl Principal {
    pub fn new(username: impl Into<String>, group: impl Into<String>) -> Self {
        Principal {
            username: username.into(),
            display_name: None,
            group: group.into(),
            user_id: 0,
            group_id: 0,
            is_admin: false,
        }
    }

    pub fn with_ids(mut self, user_id: i64, group_id: i64) -> Self {
        self.user_id = user_id;
        self.group_id = group_id;
        self
    }

    pub fn admin(mut self) -> Self {
        self.is_admin = true;
        self
    }

    pub fn shown_name(&self) -> &str {
        self.display_name.as_deref().unwrap_or(&self.username)
    }

    /// Admins see everything; others only their own group.
    pub fn can_see_group(&self, group: &str) -> bool {
        self.is_admin || self.group == group
    }
}
