"""Tree search over question revisions, driven by critic and reflection oracles.

The search keeps a tree whose nodes are question versions. Each iteration
runs four phases:

  selection        walk from the root picking the child with the highest
                   upper-confidence score until reaching a childless node;
  expansion        create ``expand_width`` children of that node via the
                   reflection oracle, scoring each child with the critic;
  simulation       descend by highest immediate reward, creating children on
                   demand, until the depth limit;
  backpropagation  walk the visited path leaf-to-root accumulating
                   ``cumulative_reward += node.reward`` and appending the
                   running total to each node's ``cum_rewards``.

Every traversal (selection and simulation alike) increments the visit count
of each node it passes through, so after ``i`` completed iterations the root
has exactly ``i`` visits and every visited node satisfies
``visits == len(cum_rewards)``.

The final answer comes from the finished tree: among all root-to-leaf paths
pick the one with the highest mean node reward, then return the
highest-reward question on that path. Ties break toward the earliest path
in child-insertion order and the shallowest node.

Besides the full search, this module provides the cheaper modes used for
comparison runs: a greedy chain without backtracking, a single direct
generation, and chain-of-thought generation with optional best-of-n
sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

from .domain import (
    CriticFeedback,
    DomainError,
    EducationalObjectives,
    QuestionState,
    ScoreOutOfRange,
    Trajectory,
    TrajectoryStep,
)
from .oracles import Oracle, OracleError, OracleRequest
from .prompts import (
    REPAIR_INSTRUCTION,
    PromptError,
    PromptRenderer,
    QuestionDraft,
    parse_json_reply,
)
from .store import UsageMeter


class DepthLimitExceeded(Exception):
    pass


class SearchError(Exception):
    """Raised when a search aborts; carries the partial tree for debugging."""

    def __init__(self, message: str, partial_tree: dict | None = None):
        super().__init__(message)
        self.partial_tree = partial_tree


@dataclass(frozen=True)
class SearchConfig:
    iterations: int = 4
    depth_limit: int = 3
    expand_width: int = 3
    exploration_c: float = 2.5
    early_stop_score: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.depth_limit < 1:
            raise ValueError("depth_limit must be >= 1")
        if self.expand_width < 1:
            raise ValueError("expand_width must be >= 1")
        if self.early_stop_score is not None and not 0 <= self.early_stop_score <= 1:
            raise ValueError("early_stop_score must be in [0, 1]")


@dataclass
class TreeNode:
    state: QuestionState
    feedback: CriticFeedback | None
    reward: float
    parent: "TreeNode | None" = None
    children: list["TreeNode"] = field(default_factory=list)
    visits: int = 0
    cum_rewards: list[float] = field(default_factory=list)

    @property
    def q_value(self) -> float:
        if not self.cum_rewards:
            return 0.0
        return sum(self.cum_rewards) / len(self.cum_rewards)

    @property
    def depth(self) -> int:
        return self.state.depth

    @property
    def id(self) -> str:
        return self.state.id

    def lineage(self) -> list["TreeNode"]:
        nodes: list[TreeNode] = []
        node: TreeNode | None = self
        while node is not None:
            nodes.append(node)
            node = node.parent
        nodes.reverse()
        return nodes


def uct_value(node: TreeNode, parent_visits: int, c: float) -> float:
    """Upper-confidence score: q + c * sqrt(ln(parent_visits) / visits).

    An unvisited node scores +inf so it is always explored before any
    visited sibling.
    """
    if parent_visits < 1:
        raise ValueError("parent_visits must be >= 1")
    if node.visits == 0:
        return math.inf
    return node.q_value + c * math.sqrt(math.log(parent_visits) / node.visits)


def backpropagate(path: list[TreeNode]) -> None:
    """Update the path leaf-to-root with running cumulative rewards."""
    cumulative = 0.0
    for node in reversed(path):
        cumulative += node.reward
        node.cum_rewards.append(cumulative)


def select(root: TreeNode, c: float) -> list[TreeNode]:
    """Walk from the root by argmax upper-confidence score to a childless node.

    Appending a node to the path marks a traversal, so its visit count is
    incremented here. Equal scores break toward the earliest child.
    """
    path = [root]
    root.visits += 1
    node = root
    while node.children:
        node = max(node.children, key=lambda child: uct_value(child, node.visits, c))
        node.visits += 1
        path.append(node)
    return path


def tree_to_dict(root: TreeNode) -> dict[str, Any]:
    """Serializable snapshot: every node with its rewards and statistics."""
    nodes = []

    def walk(node: TreeNode) -> None:
        nodes.append(
            {
                "id": node.id,
                "parent_id": node.parent.id if node.parent else None,
                "depth": node.depth,
                "question": node.state.question_text,
                "design_thought": node.state.design_thought,
                "score": node.feedback.score if node.feedback else None,
                "direction": node.feedback.direction if node.feedback else None,
                "reward": node.reward,
                "visits": node.visits,
                "cum_rewards": list(node.cum_rewards),
                "q_value": node.q_value,
                "children": [child.id for child in node.children],
            }
        )
        for child in node.children:
            walk(child)

    walk(root)
    return {"root_id": root.id, "nodes": nodes}


@dataclass
class SearchResult:
    best_question: QuestionState
    best_path: list[str]
    path_avg_reward: float
    full_tree: dict[str, Any]
    oracle_call_count: int
    total_cost: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "best_question": {
                "id": self.best_question.id,
                "question_text": self.best_question.question_text,
                "design_thought": self.best_question.design_thought,
                "depth": self.best_question.depth,
            },
            "best_path": list(self.best_path),
            "path_avg_reward": self.path_avg_reward,
            "full_tree": self.full_tree,
            "oracle_call_count": self.oracle_call_count,
            "total_cost": self.total_cost,
        }


def _leaf_paths(root: TreeNode) -> list[list[TreeNode]]:
    paths: list[list[TreeNode]] = []

    def walk(node: TreeNode, prefix: list[TreeNode]) -> None:
        path = prefix + [node]
        if not node.children:
            paths.append(path)
            return
        for child in node.children:
            walk(child, path)

    walk(root, [])
    return paths


def pick_output(root: TreeNode) -> tuple[QuestionState, list[str], float]:
    """Apply the output rule to a finished tree.

    Paths run root-to-leaf in child-insertion order; the path with the
    highest mean node reward wins, then the highest-reward node on it.
    Strict comparisons keep both tie-breaks deterministic (first wins).
    """
    best_path: list[TreeNode] | None = None
    best_mean = -math.inf
    for path in _leaf_paths(root):
        mean = sum(node.reward for node in path) / len(path)
        if mean > best_mean:
            best_mean = mean
            best_path = path
    assert best_path is not None
    best_node = best_path[0]
    for node in best_path[1:]:
        if node.reward > best_node.reward:
            best_node = node
    return best_node.state, [node.id for node in best_path], best_mean


class Planner:
    """Binds the search procedures to an oracle, templates, and a model.

    One planner instance runs one search at a time (its counters are not
    thread-safe); create one instance per concurrent task and share the
    oracle, which is safe for concurrent use.
    """

    def __init__(
        self,
        oracle: Oracle,
        renderer: PromptRenderer | None = None,
        *,
        model: str,
        temperature: float = 0.7,
        max_tokens: int = 2048,
        few_shots: tuple[str, ...] | None = None,
        meter: UsageMeter | None = None,
        repair_attempts: int = 2,
    ):
        self.oracle = oracle
        self.renderer = renderer if renderer is not None else PromptRenderer()
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.few_shots = few_shots
        self.meter = meter
        self.repair_attempts = repair_attempts
        self.calls_issued = 0
        self._next_node_id = 0

    # ------------------------------------------------------------------ oracle plumbing

    def _request(self, prompt: str, sample_index: int) -> OracleRequest:
        return OracleRequest(
            model=self.model,
            system_prompt="",
            user_prompt=prompt,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            sample_index=sample_index,
        )

    def _complete(self, prompt: str, sample_index: int) -> str:
        response = self.oracle.complete(self._request(prompt, sample_index))
        self.calls_issued += 1
        if self.meter is not None:
            self.meter.record(self.model, response)
        return response.text

    def ask_json(self, prompt: str, schema: str, sample_index: int = 0):
        """Complete a prompt and parse its JSON reply, re-asking on bad output.

        Each repair attempt appends the JSON-only instruction again, so repair
        requests stay distinct from the original (and from each other) under
        caching. After ``repair_attempts`` repairs the last error propagates.
        """
        current = prompt
        last_error: Exception | None = None
        for _ in range(self.repair_attempts + 1):
            text = self._complete(current, sample_index)
            try:
                return parse_json_reply(text, schema)
            except (PromptError, ScoreOutOfRange) as exc:
                last_error = exc
                current = current + "\n\n" + REPAIR_INSTRUCTION
        assert last_error is not None
        raise last_error

    def _fresh_state_id(self) -> str:
        node_id = f"n{self._next_node_id}"
        self._next_node_id += 1
        return node_id

    def _begin_run(self) -> tuple[int, float]:
        self._next_node_id = 0
        cost_before = self.meter.total_cost if self.meter else 0.0
        return self.calls_issued, cost_before

    def _run_totals(self, marks: tuple[int, float]) -> tuple[int, float]:
        calls_before, cost_before = marks
        cost_after = self.meter.total_cost if self.meter else 0.0
        return self.calls_issued - calls_before, cost_after - cost_before

    # ------------------------------------------------------------------ core operations

    def generate_initial(self, obj: EducationalObjectives, sample_index: int = 0) -> QuestionState:
        """Produce the depth-0 question from the generation template."""
        if self.few_shots is None:
            prompt = self.renderer.render_init(obj)
        else:
            prompt = self.renderer.render_init(obj, self.few_shots)
        draft: QuestionDraft = self.ask_json(prompt, "init", sample_index)
        return QuestionState(
            id=self._fresh_state_id(),
            question_text=draft.question,
            design_thought=draft.thought,
            depth=0,
        )

    def critic_evaluate(self, state: QuestionState, obj: EducationalObjectives, sample_index: int = 0) -> CriticFeedback:
        """Score a question against the objectives; reward is score / 10."""
        prompt = self.renderer.render_critic(obj, state)
        return self.ask_json(prompt, "critic", sample_index)

    def reflect(
        self,
        obj: EducationalObjectives,
        trajectory: Trajectory,
        state: QuestionState,
        feedback: CriticFeedback,
        sample_index: int = 0,
        depth_limit: int | None = None,
    ) -> QuestionState:
        """Produce the next question version from the revision history."""
        if depth_limit is not None and state.depth >= depth_limit:
            raise DepthLimitExceeded(f"cannot reflect past depth limit {depth_limit}")
        prompt = self.renderer.render_reflection(obj, trajectory, state, feedback)
        draft: QuestionDraft = self.ask_json(prompt, "reflection", sample_index)
        return QuestionState(
            id=self._fresh_state_id(),
            question_text=draft.question,
            design_thought=draft.thought,
            depth=state.depth + 1,
        )

    def _trajectory_to(self, node: TreeNode) -> Trajectory:
        steps = tuple(
            TrajectoryStep(ancestor.state, ancestor.feedback)
            for ancestor in node.lineage()[:-1]
        )
        return Trajectory(steps)

    def expand(self, node: TreeNode, k: int, obj: EducationalObjectives, depth_limit: int) -> list[TreeNode]:
        """Create ``k`` critic-scored children of ``node`` via reflection."""
        if node.depth >= depth_limit:
            raise DepthLimitExceeded(f"node {node.id} is terminal at depth {node.depth}")
        assert node.feedback is not None
        trajectory = self._trajectory_to(node)
        created = []
        for j in range(k):
            child_state = self.reflect(obj, trajectory, node.state, node.feedback, sample_index=j)
            child_feedback = self.critic_evaluate(child_state, obj)
            child = TreeNode(
                state=child_state,
                feedback=child_feedback,
                reward=child_feedback.reward,
                parent=node,
            )
            node.children.append(child)
            created.append(child)
        return created

    def simulate(self, node: TreeNode, obj: EducationalObjectives, config: SearchConfig) -> list[TreeNode]:
        """Descend by highest immediate reward until terminal depth.

        Childless non-terminal nodes along the way are expanded on demand.
        Returns the visited suffix (excluding ``node`` itself).
        """
        suffix = []
        while node.depth < config.depth_limit:
            if not node.children:
                self.expand(node, config.expand_width, obj, config.depth_limit)
            node = max(node.children, key=lambda child: child.reward)
            node.visits += 1
            suffix.append(node)
        return suffix

    # ------------------------------------------------------------------ run modes

    def run_search(self, obj: EducationalObjectives, config: SearchConfig | None = None) -> SearchResult:
        """Full tree search; returns the best question under the output rule."""
        config = config if config is not None else SearchConfig()
        marks = self._begin_run()
        root_state = self.generate_initial(obj)
        root_feedback = self.critic_evaluate(root_state, obj)
        root = TreeNode(state=root_state, feedback=root_feedback, reward=root_feedback.reward)
        try:
            for _ in range(config.iterations):
                path = select(root, config.exploration_c)
                node = path[-1]
                if node.depth < config.depth_limit:
                    self.expand(node, config.expand_width, obj, config.depth_limit)
                path.extend(self.simulate(node, obj, config))
                backpropagate(path)
                if config.early_stop_score is not None and any(
                    step.reward >= config.early_stop_score for step in path
                ):
                    break
        except (OracleError, PromptError, DomainError) as exc:
            raise SearchError(f"search aborted: {exc}", partial_tree=tree_to_dict(root)) from exc
        best_state, best_path, path_mean = pick_output(root)
        calls, cost = self._run_totals(marks)
        return SearchResult(
            best_question=best_state,
            best_path=best_path,
            path_avg_reward=path_mean,
            full_tree=tree_to_dict(root),
            oracle_call_count=calls,
            total_cost=cost,
        )

    def run_greedy(self, obj: EducationalObjectives, config: SearchConfig | None = None) -> SearchResult:
        """Greedy chain: keep only the best of ``expand_width`` children per step."""
        config = config if config is not None else SearchConfig()
        marks = self._begin_run()
        root_state = self.generate_initial(obj)
        root_feedback = self.critic_evaluate(root_state, obj)
        root = TreeNode(state=root_state, feedback=root_feedback, reward=root_feedback.reward)
        chain = [root]
        node = root
        for _ in range(config.depth_limit):
            children = self.expand(node, config.expand_width, obj, config.depth_limit)
            node = max(children, key=lambda child: child.reward)
            chain.append(node)
        best_node = max(chain, key=lambda n: n.reward)
        calls, cost = self._run_totals(marks)
        return SearchResult(
            best_question=best_node.state,
            best_path=[n.id for n in chain],
            path_avg_reward=sum(n.reward for n in chain) / len(chain),
            full_tree=tree_to_dict(root),
            oracle_call_count=calls,
            total_cost=cost,
        )

    def run_direct(self, obj: EducationalObjectives) -> QuestionState:
        """One generation from the template, no critique and no revision."""
        self._begin_run()
        return self.generate_initial(obj)

    def run_cot(self, obj: EducationalObjectives) -> QuestionState:
        """Single chain-of-thought generation (the template asks for the design
        reasoning before the question)."""
        self._begin_run()
        return self.generate_initial(obj)

    def run_cot_bon(self, obj: EducationalObjectives, n: int = 5) -> QuestionState:
        """Sample ``n`` generations, critic-score each, return the argmax.

        Ties break toward the earliest sample.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        self._begin_run()
        best_state: QuestionState | None = None
        best_score = -math.inf
        for i in range(n):
            state = self.generate_initial(obj, sample_index=i)
            feedback = self.critic_evaluate(state, obj)
            if feedback.score > best_score:
                best_score = feedback.score
                best_state = state
        assert best_state is not None
        return best_state
