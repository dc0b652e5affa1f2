//! The protection-key rights register.

use serde::{Deserialize, Serialize};

use crate::policy::{
    rights_to_pkru_bits, AccessRights, PolicyError, ProtectionKey, RightsVector, PROTECTION_KEY_COUNT, RUNTIME_KEY,
};

/// PKRU image: bit `2k` disables access and bit `2k+1` disables writes for key `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pkru(pub u32);

impl Pkru {
    /// Everything denied except the runtime key.
    pub fn deny_all() -> Pkru {
        Pkru(!0b11)
    }

    pub fn from_vector(vector: &RightsVector) -> Result<Pkru, PolicyError> {
        let mut pkru = Pkru::deny_all();
        for (key, rights) in vector.iter() {
            if key == RUNTIME_KEY || key.0 >= PROTECTION_KEY_COUNT {
                continue;
            }
            let bits = rights_to_pkru_bits(rights)?;
            let shift = 2 * u32::from(key.0);
            pkru.0 &= !(0b11 << shift);
            pkru.0 |= (u32::from(bits.access_disable) | u32::from(bits.write_disable) << 1) << shift;
        }
        Ok(pkru)
    }

    pub fn rights(self, key: ProtectionKey) -> AccessRights {
        if key.0 >= PROTECTION_KEY_COUNT {
            return AccessRights::NONE;
        }
        let shift = 2 * u32::from(key.0);
        let access_disable = self.0 >> shift & 1 == 1;
        let write_disable = self.0 >> (shift + 1) & 1 == 1;
        AccessRights::new(!access_disable, !access_disable && !write_disable)
    }

    pub fn can_read(self, key: ProtectionKey) -> bool {
        self.rights(key).can_read()
    }

    pub fn can_write(self, key: ProtectionKey) -> bool {
        self.rights(key).can_write()
    }

    /// The image restricted to `keys`, as a rights vector.
    pub fn to_vector(self, keys: impl IntoIterator<Item = ProtectionKey>) -> RightsVector {
        RightsVector(keys.into_iter().map(|k| (k, self.rights(k))).collect())
    }
}

/// Per-thread register state. Only thread 0 ever runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadState {
    pub pkru: Pkru,
}
