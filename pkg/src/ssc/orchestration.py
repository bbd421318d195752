"""Central process engine: registered models, running instances, human tasks.

A process model is a named graph of steps (service invocations, event
waits, human tasks, branches, parallel split/join, terminate). Instances
execute deterministically: each engine pass runs ready frontier steps in
lexicographic step-name order until everything left is blocked on an
event or a human, or the instance terminates.

Every executed step appends exactly one TransitionRecord carrying the
external input it consumed (service response payload, event payload, task
outcome) and the disposition taken. State is never mutated directly by
execution: the record is durably appended first, then applied through
`apply_transition` — the same function replay and crash recovery use — so
replaying an instance's history against its model reproduces variables,
frontier and status exactly, by construction.

Version pinning: instances stay on the model version they started with;
re-registering a model_id creates the next version.
"""

from __future__ import annotations

import re
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from ssc.audit import AuditLog
from ssc.envelope import Envelope, ServiceAddress
from ssc.errors import SscError
from ssc.util import iso_now, new_id

STEP_KINDS = (
    "service_invoke",
    "wait_event",
    "human_task",
    "exclusive_branch",
    "parallel_split",
    "join",
    "terminate",
)

DEFAULT_TASK_LEASE_S = 15 * 60

_TEMPLATE_VAR_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
_PREDICATE_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(==|!=|<=|>=|<|>)\s*(.*?)\s*$")


class OrchestrationError(SscError):
    pass


class ValidationFailed(OrchestrationError):
    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


class UnknownModel(OrchestrationError):
    pass


class UnknownInstance(OrchestrationError):
    pass


class MissingInput(OrchestrationError):
    pass


class UnknownTask(OrchestrationError):
    pass


class AlreadyClaimed(OrchestrationError):
    pass


class AlreadyCompleted(OrchestrationError):
    pass


class NotClaimant(OrchestrationError):
    pass


class RoleDenied(OrchestrationError):
    pass


# ---------------------------------------------------------------------------
# Model definition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepDef:
    """One step of a process model; `kind` selects which fields apply."""

    name: str
    kind: str
    next: Optional[str] = None
    # service_invoke
    destination: Optional[ServiceAddress] = None
    payload_template: Optional[str] = None
    output_var: Optional[str] = None
    on_fault: Optional[str] = None
    # wait_event
    topic: Optional[str] = None
    correlation_var: Optional[str] = None
    timeout_s: Optional[float] = None
    on_timeout: Optional[str] = None
    # human_task
    role: Optional[str] = None
    prompt_template: Optional[str] = None
    outcome_var: Optional[str] = None
    # exclusive_branch
    predicate: Optional[str] = None
    if_true: Optional[str] = None
    if_false: Optional[str] = None
    # parallel_split
    branches: tuple[str, ...] = ()
    join: Optional[str] = None
    # join
    arity: Optional[int] = None
    # terminate
    status: Optional[str] = None

    @staticmethod
    def from_dict(name: str, obj: dict) -> "StepDef":
        dest = obj.get("destination")
        return StepDef(
            name=name,
            kind=obj.get("kind", ""),
            next=obj.get("next"),
            destination=ServiceAddress(dest["admin_id"], dest["service_id"]) if dest else None,
            payload_template=obj.get("payload_template"),
            output_var=obj.get("output_var"),
            on_fault=obj.get("on_fault"),
            topic=obj.get("topic"),
            correlation_var=obj.get("correlation_var"),
            timeout_s=obj.get("timeout_s"),
            on_timeout=obj.get("on_timeout"),
            role=obj.get("role"),
            prompt_template=obj.get("prompt_template"),
            outcome_var=obj.get("outcome_var"),
            predicate=obj.get("predicate"),
            if_true=obj.get("if_true"),
            if_false=obj.get("if_false"),
            branches=tuple(obj.get("branches", ())),
            join=obj.get("join"),
            arity=obj.get("arity"),
            status=obj.get("status"),
        )

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.next is not None:
            out["next"] = self.next
        if self.destination is not None:
            out["destination"] = {
                "admin_id": self.destination.admin_id,
                "service_id": self.destination.service_id,
            }
        for key in (
            "payload_template", "output_var", "on_fault", "topic", "correlation_var",
            "timeout_s", "on_timeout", "role", "prompt_template", "outcome_var",
            "predicate", "if_true", "if_false", "join", "arity", "status",
        ):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        if self.branches:
            out["branches"] = list(self.branches)
        return out

    def targets(self) -> list[str]:
        """Every step name this step can hand control to."""
        out = [
            t
            for t in (self.next, self.on_fault, self.on_timeout, self.if_true, self.if_false, self.join)
            if t is not None
        ]
        out.extend(self.branches)
        return out


@dataclass(frozen=True)
class ProcessModel:
    model_id: str
    version: int
    entry_step: str
    steps: dict[str, StepDef]
    variables: frozenset[str]
    required_inputs: frozenset[str] = frozenset()

    @staticmethod
    def from_dict(obj: dict) -> "ProcessModel":
        steps = {name: StepDef.from_dict(name, sd) for name, sd in obj.get("steps", {}).items()}
        return ProcessModel(
            model_id=obj.get("model_id", ""),
            version=int(obj.get("version", 1)),
            entry_step=obj.get("entry_step", ""),
            steps=steps,
            variables=frozenset(obj.get("variables", ())),
        )

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "version": self.version,
            "entry_step": self.entry_step,
            "variables": sorted(self.variables),
            "steps": {name: sd.to_dict() for name, sd in sorted(self.steps.items())},
        }


def _template_vars(template: str) -> set[str]:
    return set(_TEMPLATE_VAR_RE.findall(template))


def render_template(template: str, variables: dict[str, str]) -> str:
    """`${var}` substitution; an unknown variable is an execution-time fault."""

    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in variables:
            raise OrchestrationError(f"unknown variable '{name}' in template")
        return variables[name]

    return _TEMPLATE_VAR_RE.sub(sub, template)


def parse_predicate(text: str) -> tuple[str, str, str]:
    match = _PREDICATE_RE.match(text)
    if not match:
        raise OrchestrationError(f"unparsable predicate {text!r} (want: var OP literal)")
    return match.group(1), match.group(2), match.group(3)


def eval_predicate(text: str, variables: dict[str, str]) -> bool:
    """var OP literal; numeric compare when both sides parse as decimal,
    lexicographic string compare otherwise."""
    var, op, literal = parse_predicate(text)
    if var not in variables:
        raise OrchestrationError(f"unknown variable '{var}' in predicate")
    left: object = variables[var]
    right: object = literal
    try:
        left_num, right_num = float(left), float(literal)
        left, right = left_num, right_num
    except ValueError:
        pass
    if op == "==":
        return left == right
    if op == "!=":
        return left != right
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    return left >= right


def validate_model(model: ProcessModel) -> list[str]:
    """Step-level diagnostics; empty list means the model is runnable."""
    diags: list[str] = []
    steps = model.steps
    if not model.model_id:
        diags.append("model_id: must be non-empty")
    if not steps:
        diags.append("steps: model has no steps")
        return diags
    if model.entry_step not in steps:
        diags.append(f"entry_step: '{model.entry_step}' is not a step")
        return diags

    for name, sd in sorted(steps.items()):
        where = f"step '{name}'"
        if sd.kind not in STEP_KINDS:
            diags.append(f"{where}: unknown kind {sd.kind!r}")
            continue
        for target in sd.targets():
            if target not in steps:
                diags.append(f"{where}: target '{target}' does not exist")
        if sd.kind == "service_invoke":
            if sd.destination is None or sd.payload_template is None or sd.output_var is None or sd.next is None:
                diags.append(f"{where}: service_invoke needs destination, payload_template, output_var, next")
        elif sd.kind == "wait_event":
            if sd.topic is None or sd.correlation_var is None or sd.output_var is None or sd.next is None:
                diags.append(f"{where}: wait_event needs topic, correlation_var, output_var, next")
            if sd.timeout_s is not None and sd.timeout_s <= 0:
                diags.append(f"{where}: timeout_s must be positive")
        elif sd.kind == "human_task":
            if sd.role is None or sd.prompt_template is None or sd.outcome_var is None or sd.next is None:
                diags.append(f"{where}: human_task needs role, prompt_template, outcome_var, next")
        elif sd.kind == "exclusive_branch":
            if sd.predicate is None or sd.if_true is None or sd.if_false is None:
                diags.append(f"{where}: exclusive_branch needs predicate, if_true, if_false")
            else:
                try:
                    var, _, _ = parse_predicate(sd.predicate)
                    if var not in model.variables:
                        diags.append(f"{where}: predicate reads undeclared variable '{var}'")
                except OrchestrationError as exc:
                    diags.append(f"{where}: {exc}")
        elif sd.kind == "parallel_split":
            if len(sd.branches) < 2 or sd.join is None:
                diags.append(f"{where}: parallel_split needs >=2 branches and a join")
            else:
                join_sd = steps.get(sd.join)
                if join_sd is not None and join_sd.kind != "join":
                    diags.append(f"{where}: join target '{sd.join}' is not a join step")
                elif join_sd is not None and join_sd.arity != len(sd.branches):
                    diags.append(
                        f"{where}: join '{sd.join}' arity {join_sd.arity} != {len(sd.branches)} branches"
                    )
        elif sd.kind == "join":
            if sd.arity is None or sd.arity < 2 or sd.next is None:
                diags.append(f"{where}: join needs arity >= 2 and next")
            owners = [s.name for s in steps.values() if s.kind == "parallel_split" and s.join == name]
            if not owners:
                diags.append(f"{where}: join is not referenced by any parallel_split")
        elif sd.kind == "terminate":
            if sd.status not in ("completed", "faulted"):
                diags.append(f"{where}: terminate status must be completed or faulted")

        for template in (sd.payload_template, sd.prompt_template):
            if template:
                for var in sorted(_template_vars(template)):
                    if var not in model.variables:
                        diags.append(f"{where}: template reads undeclared variable '{var}'")
        for var_field in ("output_var", "outcome_var", "correlation_var"):
            value = getattr(sd, var_field)
            if value is not None and value not in model.variables:
                diags.append(f"{where}: {var_field} '{value}' is not a declared variable")

    # connectivity from entry over every outgoing reference
    seen = set()
    frontier = [model.entry_step]
    while frontier:
        name = frontier.pop()
        if name in seen or name not in steps:
            continue
        seen.add(name)
        frontier.extend(steps[name].targets())
    for name in sorted(set(steps) - seen):
        diags.append(f"step '{name}': unreachable from entry")
    return diags


def compute_required_inputs(model: ProcessModel) -> frozenset[str]:
    """Variables read somewhere but never written by any step must arrive as inputs."""
    written: set[str] = set()
    read: set[str] = set()
    for sd in model.steps.values():
        for var_field in ("output_var", "outcome_var"):
            value = getattr(sd, var_field)
            if value:
                written.add(value)
        for template in (sd.payload_template, sd.prompt_template):
            if template:
                read |= _template_vars(template)
        if sd.correlation_var:
            read.add(sd.correlation_var)
        if sd.predicate:
            try:
                read.add(parse_predicate(sd.predicate)[0])
            except OrchestrationError:
                pass
    return frozenset(read - written)


# ---------------------------------------------------------------------------
# Instance state and transitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionRecord:
    idx: int
    step: str
    kind: str
    disposition: str  # next | branch_true | branch_false | split | fault_routed |
    #                   fault_terminal | timeout_routed | completed | faulted
    external: Optional[str]  # service response payload / event payload / task outcome
    detail: str
    ts: str
    event_id: Optional[str] = None  # consumed event envelope, for wait_event steps

    def to_dict(self) -> dict:
        out = {
            "idx": self.idx,
            "step": self.step,
            "kind": self.kind,
            "disposition": self.disposition,
            "detail": self.detail,
            "ts": self.ts,
        }
        if self.external is not None:
            out["external"] = self.external
        if self.event_id is not None:
            out["event_id"] = self.event_id
        return out

    @staticmethod
    def from_dict(obj: dict) -> "TransitionRecord":
        return TransitionRecord(
            idx=obj["idx"],
            step=obj["step"],
            kind=obj["kind"],
            disposition=obj["disposition"],
            external=obj.get("external"),
            detail=obj.get("detail", ""),
            ts=obj["ts"],
            event_id=obj.get("event_id"),
        )


@dataclass(frozen=True)
class ProcessInstance:
    """Externally visible snapshot of one running (or finished) instance."""

    instance_id: str
    model_id: str
    version: int
    correlation_id: str
    variables: dict[str, str]
    frontier: frozenset[str]
    status: str  # running | waiting_event | waiting_task | completed | faulted
    history: tuple[TransitionRecord, ...]


class _Instance:
    def __init__(self, instance_id, model_id, version, variables, correlation_id):
        self.instance_id = instance_id
        self.model_id = model_id
        self.version = version
        self.variables: dict[str, str] = dict(variables)
        self.correlation_id = correlation_id
        self.frontier: set[str] = set()
        self.join_arrivals: dict[str, int] = {}
        self.terminal: Optional[str] = None  # completed | faulted
        self.history: list[TransitionRecord] = []
        self.consumed_events: dict[str, set[str]] = {}  # step -> envelope ids
        self.wait_deadlines: dict[str, float] = {}
        self.lock = threading.RLock()


def _move_token(inst: _Instance, model: ProcessModel, to_step: str) -> None:
    if model.steps[to_step].kind == "join":
        inst.join_arrivals[to_step] = inst.join_arrivals.get(to_step, 0) + 1
    inst.frontier.add(to_step)


def apply_transition(inst: _Instance, model: ProcessModel, rec: TransitionRecord) -> None:
    """Apply one recorded transition to instance state.

    The single state-mutation path shared by live execution, startup replay
    and the replay oracle: everything it needs is in the record and the model.
    """
    sd = model.steps[rec.step]
    inst.history.append(rec)
    inst.frontier.discard(rec.step)
    inst.wait_deadlines.pop(rec.step, None)

    d = rec.disposition
    if d in ("completed", "faulted"):
        inst.terminal = d
        inst.frontier.clear()
        return
    if d == "fault_terminal":
        inst.terminal = "faulted"
        inst.frontier.clear()
        return

    if sd.kind in ("service_invoke", "wait_event") and d == "next" and sd.output_var:
        inst.variables[sd.output_var] = rec.external if rec.external is not None else ""
    if sd.kind == "human_task" and d == "next" and sd.outcome_var:
        inst.variables[sd.outcome_var] = rec.external if rec.external is not None else ""
    if sd.kind == "wait_event" and rec.event_id:
        inst.consumed_events.setdefault(rec.step, set()).add(rec.event_id)
    if sd.kind == "join":
        inst.join_arrivals[rec.step] = 0

    if d == "split":
        for branch in sd.branches:
            _move_token(inst, model, branch)
        return
    target = {
        "next": sd.next,
        "branch_true": sd.if_true,
        "branch_false": sd.if_false,
        "fault_routed": sd.on_fault,
        "timeout_routed": sd.on_timeout,
    }.get(d)
    if target is None:
        raise OrchestrationError(f"transition {rec.idx} of {inst.instance_id}: bad disposition {d!r}")
    _move_token(inst, model, target)


def derive_status(inst: _Instance, model: ProcessModel) -> str:
    """waiting_task wins over waiting_event when a parallel frontier has both."""
    if inst.terminal is not None:
        return inst.terminal
    kinds = {model.steps[name].kind for name in inst.frontier}
    if "human_task" in kinds:
        return "waiting_task"
    if "wait_event" in kinds:
        return "waiting_event"
    return "running"


def replay_instance(
    model: ProcessModel, inputs: dict[str, str], correlation_id: str, history: list[TransitionRecord]
) -> tuple[dict[str, str], frozenset[str], str]:
    """Re-derive (variables, frontier, status) purely from recorded history."""
    inst = _Instance("replay", model.model_id, model.version, inputs, correlation_id)
    _move_token(inst, model, model.entry_step)
    for rec in history:
        apply_transition(inst, model, rec)
    return dict(inst.variables), frozenset(inst.frontier), derive_status(inst, model)


# ---------------------------------------------------------------------------
# Human tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HumanTask:
    task_id: str
    instance_id: str
    step: str
    role: str
    prompt: str
    state: str  # open | claimed | completed
    claimant: Optional[str]
    lease_expiry: Optional[str]
    outcome: Optional[str]
    created_at: str


class _Task:
    def __init__(self, task_id, instance_id, step, role, prompt, created_at):
        self.task_id = task_id
        self.instance_id = instance_id
        self.step = step
        self.role = role
        self.prompt = prompt
        self.state = "open"
        self.claimant: Optional[str] = None
        self.lease_expiry_mono: Optional[float] = None
        self.lease_expiry: Optional[str] = None
        self.outcome: Optional[str] = None
        self.created_at = created_at
        self.lock = threading.Lock()

    def snapshot(self) -> HumanTask:
        return HumanTask(
            task_id=self.task_id,
            instance_id=self.instance_id,
            step=self.step,
            role=self.role,
            prompt=self.prompt,
            state=self.state,
            claimant=self.claimant,
            lease_expiry=self.lease_expiry,
            outcome=self.outcome,
            created_at=self.created_at,
        )


# ---------------------------------------------------------------------------
# The engine
# ---------------------------------------------------------------------------

ServiceInvoker = Callable[[ServiceAddress, bytes, str], Envelope]
RoleChecker = Callable[[str, str], bool]


class Orchestrator:
    """Engine over registered models, instances and tasks.

    Wiring is injected: `service_invoker(destination, payload, correlation)`
    performs the signed synchronous exchange (the gateway binds it to the
    cooperation mediator), `role_checker(user_id, role)` asks the identity
    module. `store_append` receives every durable record write-ahead.
    """

    def __init__(
        self,
        *,
        service_invoker: ServiceInvoker,
        role_checker: RoleChecker,
        audit: AuditLog,
        store_append: Optional[Callable[[dict], None]] = None,
        task_lease_s: float = DEFAULT_TASK_LEASE_S,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self._invoke = service_invoker
        self._has_role = role_checker
        self._audit = audit
        self._store = store_append
        self._task_lease_s = task_lease_s
        self._clock = clock
        self._lock = threading.RLock()
        self._models: dict[str, dict[int, ProcessModel]] = {}
        self._instances: dict[str, _Instance] = {}
        self._tasks: dict[str, _Task] = {}

    def _persist(self, record: dict) -> None:
        if self._store is not None:
            self._store(record)

    # -- models ---------------------------------------------------------------

    def register_model(self, model: ProcessModel | dict) -> tuple[str, int]:
        if isinstance(model, dict):
            model = ProcessModel.from_dict(model)
        with self._lock:
            versions = self._models.setdefault(model.model_id, {})
            version = max(versions) + 1 if versions else 1
            model = replace(model, version=version)
            diags = validate_model(model)
            if diags:
                raise ValidationFailed(diags)
            model = replace(model, required_inputs=compute_required_inputs(model))
            self._persist({"type": "model_registered", "model": model.to_dict()})
            versions[version] = model
            return model.model_id, version

    def has_model(self, model_id: str) -> bool:
        with self._lock:
            return model_id in self._models

    def get_model(self, model_id: str, version: Optional[int] = None) -> ProcessModel:
        with self._lock:
            versions = self._models.get(model_id)
            if not versions:
                raise UnknownModel(model_id)
            if version is None:
                version = max(versions)
            if version not in versions:
                raise UnknownModel(f"{model_id} v{version}")
            return versions[version]

    # -- instances ------------------------------------------------------------

    def start_instance(
        self,
        model_id: str,
        version: Optional[int] = None,
        inputs: Optional[dict] = None,
        correlation_id: Optional[str] = None,
    ) -> str:
        model = self.get_model(model_id, version)
        inputs = dict(inputs or {})
        undeclared = sorted(set(inputs) - set(model.variables))
        if undeclared:
            raise MissingInput(f"undeclared input variables: {', '.join(undeclared)}")
        missing = sorted(model.required_inputs - set(inputs))
        if missing:
            raise MissingInput(f"required input variables absent: {', '.join(missing)}")
        coerced = {}
        for key, value in inputs.items():
            if isinstance(value, (dict, list)):
                raise MissingInput(f"input '{key}' must be a scalar")
            coerced[key] = value if isinstance(value, str) else str(value)

        instance_id = new_id("inst")
        inst = _Instance(instance_id, model.model_id, model.version, coerced, correlation_id or instance_id)
        _move_token(inst, model, model.entry_step)
        with self._lock:
            self._persist(
                {
                    "type": "instance_started",
                    "instance_id": instance_id,
                    "model_id": model.model_id,
                    "version": model.version,
                    "inputs": coerced,
                    "correlation_id": inst.correlation_id,
                    "created_at": iso_now(),
                }
            )
            self._instances[instance_id] = inst
        self._audit.record(
            "orchestration_transition", inst.correlation_id, "ssc", instance_id, "ok",
            f"instance_started model={model.model_id} v{model.version}",
        )
        with inst.lock:
            self._run_pass(inst)
        return instance_id

    def _instance(self, instance_id: str) -> _Instance:
        with self._lock:
            inst = self._instances.get(instance_id)
        if inst is None:
            raise UnknownInstance(instance_id)
        return inst

    def _model_for(self, inst: _Instance) -> ProcessModel:
        return self.get_model(inst.model_id, inst.version)

    def advance(self, instance_id: str) -> ProcessInstance:
        """Run ready steps until blocked or terminal; idempotent when nothing is ready."""
        inst = self._instance(instance_id)
        with inst.lock:
            self._run_pass(inst)
            return self._snapshot(inst)

    def instance_state(self, instance_id: str) -> ProcessInstance:
        inst = self._instance(instance_id)
        with inst.lock:
            return self._snapshot(inst)

    def find_by_correlation(self, correlation_id: str) -> list[str]:
        with self._lock:
            return sorted(
                i.instance_id for i in self._instances.values() if i.correlation_id == correlation_id
            )

    def list_instances(self) -> list[str]:
        with self._lock:
            return sorted(self._instances)

    def _snapshot(self, inst: _Instance) -> ProcessInstance:
        model = self._model_for(inst)
        return ProcessInstance(
            instance_id=inst.instance_id,
            model_id=inst.model_id,
            version=inst.version,
            correlation_id=inst.correlation_id,
            variables=dict(inst.variables),
            frontier=frozenset(inst.frontier),
            status=derive_status(inst, model),
            history=tuple(inst.history),
        )

    # -- engine pass ----------------------------------------------------------

    def _run_pass(self, inst: _Instance) -> None:
        model = self._model_for(inst)
        while inst.terminal is None:
            ready = self._pick_ready(inst, model)
            if ready is None:
                break
            self._execute(inst, model, ready)

    def _pick_ready(self, inst: _Instance, model: ProcessModel) -> Optional[str]:
        for name in sorted(inst.frontier):
            sd = model.steps[name]
            if sd.kind in ("service_invoke", "exclusive_branch", "parallel_split", "terminate"):
                return name
            if sd.kind == "join":
                if inst.join_arrivals.get(name, 0) >= (sd.arity or 0):
                    return name
            elif sd.kind == "human_task":
                self._ensure_task(inst, model, sd)
            elif sd.kind == "wait_event":
                deadline = inst.wait_deadlines.get(name)
                if deadline is None and sd.timeout_s is not None:
                    inst.wait_deadlines[name] = self._clock() + sd.timeout_s
                elif deadline is not None and self._clock() >= deadline:
                    return name
        return None

    def _record(
        self,
        inst: _Instance,
        model: ProcessModel,
        step: StepDef,
        disposition: str,
        external: Optional[str] = None,
        detail: str = "",
        event_id: Optional[str] = None,
        outcome: str = "ok",
    ) -> None:
        rec = TransitionRecord(
            idx=len(inst.history) + 1,
            step=step.name,
            kind=step.kind,
            disposition=disposition,
            external=external,
            detail=detail,
            ts=iso_now(),
            event_id=event_id,
        )
        self._persist({"type": "transition", "instance_id": inst.instance_id, "record": rec.to_dict()})
        apply_transition(inst, model, rec)
        self._audit.record(
            "orchestration_transition", inst.correlation_id, "ssc", inst.instance_id, outcome,
            f"step={step.name} kind={step.kind} disposition={disposition}"
            + (f" {detail}" if detail else ""),
        )

    def _execute(self, inst: _Instance, model: ProcessModel, name: str) -> None:
        sd = model.steps[name]
        if sd.kind == "service_invoke":
            self._execute_service(inst, model, sd)
        elif sd.kind == "exclusive_branch":
            try:
                taken = eval_predicate(sd.predicate or "", inst.variables)
            except OrchestrationError as exc:
                self._record(inst, model, sd, "fault_terminal", detail=str(exc), outcome="fault")
                return
            self._record(inst, model, sd, "branch_true" if taken else "branch_false")
        elif sd.kind == "parallel_split":
            self._record(inst, model, sd, "split")
        elif sd.kind == "join":
            self._record(inst, model, sd, "next")
        elif sd.kind == "terminate":
            outcome = "ok" if sd.status == "completed" else "fault"
            self._record(inst, model, sd, sd.status or "completed", outcome=outcome)
        elif sd.kind == "wait_event":  # only reachable on timeout expiry
            if sd.on_timeout:
                self._record(inst, model, sd, "timeout_routed", detail="wait timed out")
            else:
                self._record(inst, model, sd, "fault_terminal", detail="wait timed out", outcome="fault")
        else:
            raise OrchestrationError(f"step {name}: kind {sd.kind} is not directly executable")

    def _execute_service(self, inst: _Instance, model: ProcessModel, sd: StepDef) -> None:
        try:
            payload = render_template(sd.payload_template or "", inst.variables)
        except OrchestrationError as exc:
            self._record(inst, model, sd, "fault_terminal", detail=str(exc), outcome="fault")
            return
        response = self._invoke(sd.destination, payload.encode("utf-8"), inst.correlation_id)
        body_text = response.body.payload.decode("utf-8", "replace")
        if response.message_kind == "response":
            self._record(inst, model, sd, "next", external=body_text)
        elif sd.on_fault:
            self._record(inst, model, sd, "fault_routed", external=body_text, detail="backend fault")
        else:
            self._record(
                inst, model, sd, "fault_terminal", external=body_text,
                detail="backend fault, no on_fault route", outcome="fault",
            )

    # -- events ---------------------------------------------------------------

    def deliver_event(self, topic: str, event: Envelope) -> list[str]:
        """Hand one published event to every instance waiting on it.

        A waiting step matches when its topic equals `topic`, its
        correlation_var's current value equals the event's correlation_id
        (both present), and this step has not consumed this envelope before.
        """
        if event.correlation_id is None:
            return []
        advanced = []
        with self._lock:
            candidates = list(self._instances.values())
        for inst in candidates:
            with inst.lock:
                if inst.terminal is not None:
                    continue
                model = self._model_for(inst)
                matched = False
                for name in sorted(inst.frontier):
                    sd = model.steps[name]
                    if sd.kind != "wait_event" or sd.topic != topic:
                        continue
                    value = inst.variables.get(sd.correlation_var or "")
                    if value is None or value != event.correlation_id:
                        continue
                    if event.envelope_id in inst.consumed_events.get(name, set()):
                        continue
                    self._record(
                        inst, model, sd, "next",
                        external=event.body.payload.decode("utf-8", "replace"),
                        event_id=event.envelope_id,
                    )
                    matched = True
                if matched:
                    self._run_pass(inst)
                    advanced.append(inst.instance_id)
        return advanced

    # -- human tasks ------------------------------------------------------------

    def _ensure_task(self, inst: _Instance, model: ProcessModel, sd: StepDef) -> None:
        with self._lock:
            for task in self._tasks.values():
                if task.instance_id == inst.instance_id and task.step == sd.name and task.state != "completed":
                    return
            try:
                prompt = render_template(sd.prompt_template or "", inst.variables)
            except OrchestrationError:
                prompt = sd.prompt_template or ""
            task = _Task(new_id("task"), inst.instance_id, sd.name, sd.role or "", prompt, iso_now())
            self._persist(
                {
                    "type": "task_created",
                    "task_id": task.task_id,
                    "instance_id": task.instance_id,
                    "step": task.step,
                    "role": task.role,
                    "prompt": task.prompt,
                    "created_at": task.created_at,
                }
            )
            self._tasks[task.task_id] = task
        self._audit.record(
            "task_event", inst.correlation_id, "ssc", task.task_id, "ok",
            f"created step={sd.name} role={sd.role}",
        )

    def list_tasks(
        self,
        role: Optional[str] = None,
        state: Optional[str] = None,
        instance_id: Optional[str] = None,
    ) -> list[HumanTask]:
        with self._lock:
            tasks = sorted(self._tasks.values(), key=lambda t: t.task_id)
        out = []
        for task in tasks:
            if role is not None and task.role != role:
                continue
            if state is not None and task.state != state:
                continue
            if instance_id is not None and task.instance_id != instance_id:
                continue
            out.append(task.snapshot())
        return out

    def _task(self, task_id: str) -> _Task:
        with self._lock:
            task = self._tasks.get(task_id)
        if task is None:
            raise UnknownTask(task_id)
        return task

    def get_task(self, task_id: str) -> HumanTask:
        return self._task(task_id).snapshot()

    def claim_task(self, task_id: str, user_id: str) -> HumanTask:
        task = self._task(task_id)
        with task.lock:
            if task.state == "completed":
                raise AlreadyCompleted(task_id)
            if not self._has_role(user_id, task.role):
                raise RoleDenied(f"{user_id} lacks role {task.role}")
            lease_live = task.lease_expiry_mono is not None and self._clock() < task.lease_expiry_mono
            if task.state == "claimed" and lease_live:
                raise AlreadyClaimed(f"{task_id} held by {task.claimant}")
            task.state = "claimed"
            task.claimant = user_id
            task.lease_expiry_mono = self._clock() + self._task_lease_s
            task.lease_expiry = iso_now()  # informational; lease math uses the monotonic clock
            self._persist(
                {"type": "task_claimed", "task_id": task_id, "user_id": user_id, "at": iso_now()}
            )
            snapshot = task.snapshot()
        inst = self._instance(task.instance_id)
        self._audit.record(
            "task_event", inst.correlation_id, user_id, task_id, "ok", f"claimed step={task.step}"
        )
        return snapshot

    def complete_task(self, task_id: str, user_id: str, outcome: str) -> ProcessInstance:
        task = self._task(task_id)
        with task.lock:
            if task.state == "completed":
                raise AlreadyCompleted(task_id)
            if task.state != "claimed" or task.claimant != user_id:
                raise NotClaimant(f"{task_id} is not claimed by {user_id}")
            task.state = "completed"
            task.outcome = outcome
            self._persist(
                {"type": "task_completed", "task_id": task_id, "user_id": user_id, "outcome": outcome}
            )
        inst = self._instance(task.instance_id)
        self._audit.record(
            "task_event", inst.correlation_id, user_id, task_id, "ok",
            f"completed step={task.step} outcome={outcome}",
        )
        with inst.lock:
            model = self._model_for(inst)
            if task.step in inst.frontier:
                self._record(inst, model, model.steps[task.step], "next", external=outcome)
                self._run_pass(inst)
            return self._snapshot(inst)

    # -- recovery ---------------------------------------------------------------

    def load_record(self, record: dict) -> None:
        """Rebuild engine state from one persisted record (startup replay)."""
        kind = record["type"]
        if kind == "model_registered":
            model = ProcessModel.from_dict(record["model"])
            model = replace(model, required_inputs=compute_required_inputs(model))
            self._models.setdefault(model.model_id, {})[model.version] = model
        elif kind == "instance_started":
            inst = _Instance(
                record["instance_id"], record["model_id"], record["version"],
                record["inputs"], record["correlation_id"],
            )
            model = self.get_model(inst.model_id, inst.version)
            _move_token(inst, model, model.entry_step)
            self._instances[inst.instance_id] = inst
        elif kind == "transition":
            inst = self._instances[record["instance_id"]]
            apply_transition(inst, self._model_for(inst), TransitionRecord.from_dict(record["record"]))
        elif kind == "task_created":
            task = _Task(
                record["task_id"], record["instance_id"], record["step"],
                record["role"], record["prompt"], record["created_at"],
            )
            self._tasks[task.task_id] = task
        elif kind == "task_claimed":
            task = self._tasks[record["task_id"]]
            task.state = "claimed"
            task.claimant = record["user_id"]
            task.lease_expiry_mono = self._clock() + self._task_lease_s
            task.lease_expiry = record.get("at")
        elif kind == "task_completed":
            task = self._tasks[record["task_id"]]
            task.state = "completed"
            task.outcome = record["outcome"]
        else:
            raise OrchestrationError(f"unknown instance-store record type {kind!r}")

    def resume_after_recovery(self) -> list[str]:
        """Run an engine pass for every non-terminal instance (recreates
        pending tasks and wait deadlines, resumes frontier service steps)."""
        resumed = []
        with self._lock:
            instances = list(self._instances.values())
        for inst in instances:
            with inst.lock:
                if inst.terminal is None:
                    self._run_pass(inst)
                    resumed.append(inst.instance_id)
        return resumed

    def reconcile_events(self, retained: Callable[[str], list[tuple[int, Envelope]]]) -> list[str]:
        """Close the publish/deliver crash window: feed retained events that
        waiting steps have not consumed yet back through deliver_event."""
        with self._lock:
            instances = list(self._instances.values())
        topics = set()
        for inst in instances:
            with inst.lock:
                if inst.terminal is not None:
                    continue
                model = self._model_for(inst)
                for name in inst.frontier:
                    sd = model.steps[name]
                    if sd.kind == "wait_event" and sd.topic:
                        topics.add(sd.topic)
        advanced = []
        for topic in sorted(topics):
            for _, event in retained(topic):
                advanced.extend(self.deliver_event(topic, event))
        return advanced
