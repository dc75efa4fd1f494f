"""
Mastodon REST client

PlatformClient over the Mastodon v1 REST API with one bearer token per
account. Blank accounts are claimed from a token pool in order; agents are
bound to them by username, which stays local to the client (real servers keep
their own usernames).

Timestamps come from the server, not from simulated time. The client keeps a
local log of its own successful mutations so engine analytics still work.
"""

import logging
import os
import re
import threading
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence, Set

import httpx

from src.social_platform import (
    Account,
    BlockedInteractionError,
    EventKind,
    FollowGraph,
    InsufficientAccountsError,
    OversizeTootError,
    PlatformClient,
    PlatformError,
    PlatformEvent,
    Toot,
    UnknownTargetError,
    check_toot_text,
)

logger = logging.getLogger(__name__)

TOKENS_ENV = "MASTOSIM_MASTODON_TOKENS"
_TAG_RE = re.compile(r"<[^>]+>")


def tokens_from_env(var: str = TOKENS_ENV) -> List[str]:
    """Comma-separated access tokens for pre-created blank accounts."""
    raw = os.getenv(var, "")
    return [t.strip() for t in raw.split(",") if t.strip()]


def status_to_toot(status: Dict[str, Any]) -> Toot:
    reblog = status.get("reblog")
    text = "" if reblog else _TAG_RE.sub("", status.get("content") or "")
    return Toot(
        id=str(status["id"]),
        author=str(status["account"]["id"]),
        text=text[:500],
        created_at=datetime.fromisoformat(status["created_at"].replace("Z", "+00:00")),
        in_reply_to=status.get("in_reply_to_id"),
        mentions=[str(m["id"]) for m in status.get("mentions", [])],
        boost_of=str(reblog["id"]) if reblog else None,
    )


class MastodonRestClient(PlatformClient):
    """
    Mastodon v1 subset:

        POST  /api/v1/statuses                       post_toot, reply
        GET   /api/v1/statuses/:id                   get_toot
        POST  /api/v1/statuses/:id/reblog            boost
        POST  /api/v1/statuses/:id/favourite         favorite
        POST  /api/v1/accounts/:id/(un)follow        follow, unfollow
        POST  /api/v1/accounts/:id/(un)block         block, unblock
        PATCH /api/v1/accounts/update_credentials    update_profile
        GET   /api/v1/timelines/home                 get_home_timeline
        GET   /api/v1/accounts/:id/following         following
        GET   /api/v1/accounts/verify_credentials    account binding

    httpx.Client is thread-safe; calls for one account are issued in order by
    whichever worker owns that agent.
    """

    def __init__(
        self,
        base_url: str,
        tokens: Sequence[str],
        start_time: datetime,
        episode_minutes: int = 30,
        client: Optional[httpx.Client] = None,
        timeout: float = 30.0,
    ):
        super().__init__(start_time, episode_minutes)
        self._pool = list(tokens)
        self._client = client or httpx.Client(base_url=base_url.rstrip("/"), timeout=timeout)
        self._owns_client = client is None
        self._lock = threading.Lock()
        self._accounts: Dict[str, Account] = {}
        self._by_username: Dict[str, str] = {}
        self._events: List[PlatformEvent] = []
        self._favorites: Set[tuple] = set()

    @classmethod
    def from_env(cls, base_url: str, start_time: datetime, episode_minutes: int = 30) -> "MastodonRestClient":
        tokens = tokens_from_env()
        if not tokens:
            raise PlatformError(f"no access tokens found in ${TOKENS_ENV}")
        return cls(base_url, tokens, start_time, episode_minutes)

    # ---- HTTP plumbing ----

    def _token(self, actor: str) -> str:
        account = self._accounts.get(actor)
        if account is None:
            raise UnknownTargetError(f"account {actor} is not bound to a token")
        return account.token

    def _request(self, method: str, path: str, token: str, **kwargs) -> Any:
        try:
            response = self._client.request(
                method, path, headers={"Authorization": f"Bearer {token}"}, **kwargs
            )
        except httpx.HTTPError as e:
            raise PlatformError(f"{method} {path} failed: {e}") from e

        if response.status_code < 400:
            return response.json() if response.content else None

        try:
            detail = response.json().get("error", response.text)
        except ValueError:
            detail = response.text
        status = response.status_code
        if status == 401:
            raise PlatformError(f"credential failure on {path}: {detail}")
        if status == 403:
            raise BlockedInteractionError(detail)
        if status == 404:
            raise UnknownTargetError(f"{path}: {detail}")
        if status == 422 and "character limit" in str(detail).lower():
            raise OversizeTootError(detail)
        raise PlatformError(f"{method} {path} returned {status}: {detail}")

    def _record(self, kind: EventKind, actor: str, payload: Dict[str, Any]) -> None:
        with self._lock:
            self._events.append(PlatformEvent(
                seq=len(self._events), episode=self.episode, actor=actor, kind=kind, payload=payload,
            ))

    # ---- accounts ----

    def register_account(self, username: str, display_name: str, bio: str = "") -> str:
        username = username.lower()
        with self._lock:
            if username in self._by_username:
                return self._by_username[username]
            if not self._pool:
                raise InsufficientAccountsError(
                    f"no blank account left for {username}; supply more tokens"
                )
            token = self._pool.pop(0)

        me = self._request("GET", "/api/v1/accounts/verify_credentials", token)
        account_id = str(me["id"])
        self._request(
            "PATCH", "/api/v1/accounts/update_credentials", token,
            json={"display_name": display_name, "note": bio},
        )
        with self._lock:
            self._accounts[account_id] = Account(
                id=account_id, username=username, display_name=display_name, bio=bio, token=token,
            )
            self._by_username[username] = account_id
        self._record(EventKind.REGISTER, "", {
            "username": username, "display_name": display_name, "bio": bio,
        })
        logger.debug(f"Bound {username} to remote account {account_id}")
        return account_id

    def lookup(self, username: str) -> str:
        username = username.lstrip("@").lower()
        with self._lock:
            if username in self._by_username:
                return self._by_username[username]
            any_token = next(iter(self._accounts.values())).token if self._accounts else None
        if any_token is None:
            raise UnknownTargetError(f"unknown username: {username}")
        data = self._request("GET", "/api/v1/accounts/lookup", any_token, params={"acct": username})
        return str(data["id"])

    def list_accounts(self) -> List[Account]:
        with self._lock:
            return list(self._accounts.values())

    def update_profile(self, actor: str, bio: str, display_name: Optional[str] = None) -> None:
        body = {"note": bio}
        if display_name:
            body["display_name"] = display_name
        self._request("PATCH", "/api/v1/accounts/update_credentials", self._token(actor), json=body)
        with self._lock:
            self._accounts[actor].bio = bio
        self._record(EventKind.PROFILE_UPDATE, actor, body)

    # ---- statuses ----

    def post_toot(self, actor: str, text: str) -> Toot:
        check_toot_text(text)
        status = self._request("POST", "/api/v1/statuses", self._token(actor), json={"status": text})
        toot = status_to_toot(status)
        self._record(EventKind.TOOT, actor, {"text": text, "toot": toot.id})
        return toot

    def reply(self, actor: str, parent: str, text: str) -> Toot:
        check_toot_text(text)
        status = self._request(
            "POST", "/api/v1/statuses", self._token(actor),
            json={"status": text, "in_reply_to_id": parent},
        )
        toot = status_to_toot(status)
        self._record(EventKind.REPLY, actor, {"text": text, "in_reply_to": parent, "toot": toot.id})
        return toot

    def boost(self, actor: str, toot: str) -> Toot:
        status = self._request("POST", f"/api/v1/statuses/{toot}/reblog", self._token(actor))
        boosted = status_to_toot(status)
        self._record(EventKind.BOOST, actor, {"boost_of": boosted.boost_of or toot})
        return boosted

    def favorite(self, actor: str, toot: str) -> None:
        self._request("POST", f"/api/v1/statuses/{toot}/favourite", self._token(actor))
        with self._lock:
            if (actor, toot) in self._favorites:
                return
            self._favorites.add((actor, toot))
        self._record(EventKind.FAVORITE, actor, {"toot": toot})

    def get_toot(self, toot_id: str) -> Toot:
        with self._lock:
            any_token = next(iter(self._accounts.values())).token if self._accounts else None
        if any_token is None:
            raise UnknownTargetError(f"cannot fetch toot {toot_id}: no account is bound yet")
        return status_to_toot(self._request("GET", f"/api/v1/statuses/{toot_id}", any_token))

    # ---- relationships ----

    def _relationship(self, actor: str, target: str, verb: str, kind: EventKind) -> None:
        if actor == target:
            raise PlatformError(f"cannot {verb} yourself")
        before = self._request(
            "GET", "/api/v1/accounts/relationships", self._token(actor), params={"id[]": target},
        )
        state = before[0] if before else {}
        self._request("POST", f"/api/v1/accounts/{target}/{verb}", self._token(actor))
        already = {
            "follow": state.get("following"),
            "unfollow": not state.get("following", False),
            "block": state.get("blocking"),
            "unblock": not state.get("blocking", False),
        }[verb]
        if not already:
            self._record(kind, actor, {"target": target})

    def follow(self, actor: str, target: str) -> None:
        self._relationship(actor, target, "follow", EventKind.FOLLOW)

    def unfollow(self, actor: str, target: str) -> None:
        self._relationship(actor, target, "unfollow", EventKind.UNFOLLOW)

    def block(self, actor: str, target: str) -> None:
        self._relationship(actor, target, "block", EventKind.BLOCK)

    def unblock(self, actor: str, target: str) -> None:
        self._relationship(actor, target, "unblock", EventKind.UNBLOCK)

    def following(self, actor: str) -> Set[str]:
        data = self._request(
            "GET", f"/api/v1/accounts/{actor}/following", self._token(actor), params={"limit": 80},
        )
        return {str(a["id"]) for a in data}

    def follow_graph(self) -> FollowGraph:
        known = set(self._accounts)
        graph = FollowGraph()
        for account in self.list_accounts():
            for target in self.following(account.id) & known:
                graph.add(account.id, target)
        return graph

    # ---- timelines ----

    def get_home_timeline(self, actor: str, limit: int = 20) -> List[Toot]:
        data = self._request(
            "GET", "/api/v1/timelines/home", self._token(actor), params={"limit": limit},
        )
        return [status_to_toot(s) for s in data]

    def get_account_timeline(self, actor: str, target: str, limit: int = 20) -> List[Toot]:
        data = self._request(
            "GET", f"/api/v1/accounts/{target}/statuses", self._token(actor), params={"limit": limit},
        )
        return [status_to_toot(s) for s in data]

    def events(self) -> List[PlatformEvent]:
        with self._lock:
            return list(self._events)

    def close(self) -> None:
        if self._owns_client:
            self._client.close()
