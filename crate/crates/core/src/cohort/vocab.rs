// SPDX-License-Identifier: Apache-2.0

//! Closed vocabulary for the per-patient static variables.

use serde::{Deserialize, Serialize};

macro_rules! flag_vocabulary {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => ($label:literal, $column:literal)),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Human-readable name, as rendered into prompts.
            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            /// Column name in the profile file.
            pub fn column(self) -> &'static str {
                match self {
                    $($name::$variant => $column),+
                }
            }

            pub fn from_column(column: &str) -> Option<Self> {
                match column {
                    $($column => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

flag_vocabulary! {
    /// Comorbidity flags. The Charlson index is carried separately as an integer.
    Comorbidity {
        DiabetesMellitus => ("Diabetes Mellitus", "diabetes_mellitus"),
        Hypertension => ("Hypertension", "hypertension"),
        Hyperlipidemia => ("Hyperlipidemia", "hyperlipidemia"),
        CoronaryArteryDisease => ("Coronary Artery Disease", "coronary_artery_disease"),
        CardiovascularDisease => ("Cardiovascular Disease", "cardiovascular_disease"),
        AtrialFibrillation => ("Atrial Fibrillation", "atrial_fibrillation"),
        PeripheralArteryDisease => ("Peripheral Artery Disease", "peripheral_artery_disease"),
        Dementia => ("Dementia", "dementia"),
        HepatitisB => ("Hepatitis B Virus", "hepatitis_b_virus"),
        HepatitisC => ("Hepatitis C Virus", "hepatitis_c_virus"),
        LiverCirrhosis => ("Liver Cirrhosis", "liver_cirrhosis"),
        PepticUlcer => ("Peptic Ulcer", "peptic_ulcer"),
        Malignancy => ("Malignancy", "malignancy"),
        GoutyNephropathy => ("Gouty Nephropathy", "gouty_nephropathy"),
        Copd => ("Chronic Obstructive Pulmonary Disease", "copd"),
        Asthma => ("Asthma", "asthma"),
    }
}

flag_vocabulary! {
    Medication {
        Antiplatelets => ("Antiplatelets", "antiplatelets"),
        Anticoagulants => ("Anticoagulants", "anticoagulants"),
        AceiOrArb => ("ACE Inhibitors or ARBs", "acei_or_arb"),
        CalciumChannelBlockers => ("Calcium Channel Blockers", "calcium_channel_blockers"),
        BetaBlockers => ("Beta-Blockers", "beta_blockers"),
        AlphaBlockers => ("Alpha-Blockers", "alpha_blockers"),
        Statins => ("Statins", "statins"),
        Fibrates => ("Fibrates", "fibrates"),
        Metformin => ("Metformin", "metformin"),
        Dpp4Inhibitors => ("DPP4 Inhibitors", "dpp4_inhibitors"),
        Thiazolidinediones => ("Thiazolidinediones", "thiazolidinediones"),
        Sulfonylureas => ("Sulfonylureas", "sulfonylureas"),
        AlphaGlucosidaseInhibitors => ("Alpha-Glucosidase Inhibitors", "alpha_glucosidase_inhibitors"),
        Insulin => ("Insulin", "insulin"),
        ProtonPumpInhibitors => ("Proton Pump Inhibitors", "proton_pump_inhibitors"),
        H2Blockers => ("H2 Blockers", "h2_blockers"),
        ThiazideDiuretics => ("Thiazide Diuretics", "thiazide_diuretics"),
        LoopDiuretics => ("Loop Diuretics", "loop_diuretics"),
        PotassiumSparingAgents => ("Potassium-Sparing Agents", "potassium_sparing_agents"),
        Colchicine => ("Colchicine", "colchicine"),
        UricAcidLoweringAgents => ("Uric Acid Lowering Agents", "uric_acid_lowering_agents"),
        Nsaids => ("NSAIDs", "nsaids"),
        TraditionalNsaids => ("Traditional NSAIDs", "traditional_nsaids"),
        Cox2Inhibitors => ("COX2 Inhibitors", "cox2_inhibitors"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoking {
    Never,
    Former,
    Current,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drinking {
    Never,
    Occasional,
    Frequent,
    Unknown,
}

impl Gender {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" => Some(Gender::Male),
            "f" | "female" => Some(Gender::Female),
            "o" | "other" => Some(Gender::Other),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Other => "other",
        }
    }

    /// Numeric code used by the tabular baselines.
    pub fn code(self) -> f64 {
        match self {
            Gender::Male => 0.0,
            Gender::Female => 1.0,
            Gender::Other => 0.5,
        }
    }
}

impl Smoking {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "never" => Some(Smoking::Never),
            "former" => Some(Smoking::Former),
            "current" => Some(Smoking::Current),
            "" | "unknown" => Some(Smoking::Unknown),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Smoking::Never => "never",
            Smoking::Former => "former",
            Smoking::Current => "current",
            Smoking::Unknown => "unknown",
        }
    }
}

impl Drinking {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "never" => Some(Drinking::Never),
            "occasional" => Some(Drinking::Occasional),
            "frequent" => Some(Drinking::Frequent),
            "" | "unknown" => Some(Drinking::Unknown),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Drinking::Never => "never",
            Drinking::Occasional => "occasional",
            Drinking::Frequent => "frequent",
            Drinking::Unknown => "unknown",
        }
    }
}
