"""Constants for MAS FaultLab."""

DOMAIN = "mas_faultlab"

SCHEMA_VERSION = 1
HASH_ALGO = "sha256"
SEED_MAX = 2**64 - 1

# Campaign document keys
CONF_SCHEMA_VERSION = "schema_version"
CONF_CAMPAIGN_SEED = "campaign_seed"
CONF_TASKS = "tasks"
CONF_TASK_ID = "id"
CONF_TASK_INPUT = "input"
CONF_TASK_SOLVABLE = "solvable"
CONF_BASELINE_REF = "baseline_ref"
CONF_FAULT_SPECS = "fault_specs"
CONF_EXECUTION_TARGET = "execution_target"
CONF_OUTPUT_DIR = "output_dir"
CONF_INJECTOR = "injector"

CONF_SPEC_ID = "id"
CONF_FAULT_TYPE = "fault_type"
CONF_TARGET = "target"
CONF_PARAMS = "params"
CONF_MODE = "mode"
CONF_SEED = "seed"

CONF_KIND = "kind"
CONF_AGENT = "agent"
CONF_POINT = "point"
CONF_SENDER = "sender"
CONF_RECIPIENT = "recipient"

TARGET_KIND_AGENT = "agent"
TARGET_KIND_EDGE = "edge"
TARGET_KIND_SIMULATOR = "simulator"
TARGET_KIND_GATEWAY = "gateway"

CONF_PRESET = "preset"
CONF_SCENARIO = "scenario"
CONF_UPSTREAM = "upstream"
CONF_AGENT_MAPPING = "agent_mapping"
CONF_HEADER = "header"
CONF_PATTERNS = "patterns"
CONF_MATCH = "match"

CONF_ENDPOINT = "endpoint"
CONF_MODEL = "model"
CONF_MAX_RETRIES = "max_retries"
CONF_TIMEOUT = "timeout"
CONF_THRESHOLDS = "thresholds"

# Scenario document keys
CONF_TOPOLOGY = "topology"
CONF_AGENTS = "agents"
CONF_AGENT_ID = "id"
CONF_ROLE = "role"
CONF_P_DETECT = "p_detect"
CONF_P_FIX = "p_fix"
CONF_P_SUCC_GIVEN_FIX = "p_succ_given_fix"
CONF_P_SUCC_GIVEN_UNFIXED = "p_succ_given_unfixed"
CONF_TIER_LABEL = "tier_label"
CONF_DEDUP = "dedup"
CONF_SUBSCRIPTIONS = "subscriptions"
CONF_MAX_HOPS = "max_hops"
CONF_TOOLS = "tools"
CONF_SHARED_POOL = "shared_pool"
CONF_POOL_RECOVERY = "pool_recovery"
CONF_MAX_ITERATIONS = "max_iterations"
CONF_TURN_LIMIT = "turn_limit"
CONF_MAX_DELIVERIES = "max_deliveries"

# Injector / judge defaults
DEFAULT_MAX_RETRIES = 2
DEFAULT_INJECTOR_MODEL = "injector"
DEFAULT_JUDGE_MODEL = "judge"
DEFAULT_KEYWORDS_RETAINED_CONFLICT = 0.7
DEFAULT_KEYWORDS_RETAINED_AMBIGUITY = 0.0
DEFAULT_CONTEXT_BUDGET = 12000
DEFAULT_KEEP_LAST_EVENTS = 40
DEFAULT_MAX_IN_FLIGHT = 4

# Simulator defaults
DEFAULT_MAX_HOPS = 8
DEFAULT_MAX_ITERATIONS = 3
DEFAULT_TURN_LIMIT = 10
DEFAULT_MAX_DELIVERIES = 64
DEFAULT_POOL_RECOVERY = 1.0

# Gateway
HEADER_AGENT = "x-mas-agent"
HEADER_TASK = "x-mas-task"
HEADER_SPEC = "x-mas-spec"
PLAN_SPEC_ID = "plan"
DEFAULT_LISTEN = "127.0.0.1:8080"
UNMAPPED_AGENT = "unmapped"
UNTRACKED_TASK = "untracked"
BASELINE_SPEC_ID = "baseline"
ENV_UPSTREAM_KEY = "MAS_FAULTLAB_UPSTREAM_KEY"
ENV_INJECTOR_KEY = "MAS_FAULTLAB_INJECTOR_KEY"
CHAT_COMPLETIONS_PATH = "/v1/chat/completions"

# Timeouts for HTTP operations in seconds.
CONNECT_TIMEOUT = 10
READ_TIMEOUT = 60

# Sender id of the task input entering a simulated topology.
ENTRY_SENDER = "user"

CONTEXT_TRUNCATED_MARKER = "[context truncated]"
MEMORY_LOSS_UNIT = "messages"

MANIFEST_FILE = "manifest.json"
BASELINE_DIR = "baseline"
TRACES_DIR = "traces"
GATEWAY_DIR = "gateway"
REPORT_JSON_FILE = "report.json"
REPORT_TABLE_FILE = "report.txt"
ANNOTATIONS_FILE = "annotations.jsonl"
TRACE_SUFFIX = ".jsonl"
