"""
Emulator HTTP face

Exposes a PlatformEmulator as the Mastodon v1 subset that MastodonRestClient
speaks, so the REST client's contract suite can run in-process through
fastapi.testclient.TestClient. Accounts authenticate with their emulator
token ("token-<username>").
"""

import logging
from typing import Any, Dict, List, Optional

from fastapi import Depends, FastAPI, Header, HTTPException, Query, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from src.social_platform import (
    Account,
    BlockedInteractionError,
    MAX_TOOT_CHARS,
    OversizeTootError,
    PlatformEmulator,
    PlatformError,
    Toot,
    UnknownTargetError,
)

logger = logging.getLogger(__name__)


# ========================================
# Request Models
# ========================================

class StatusRequest(BaseModel):
    """Body of POST /api/v1/statuses."""
    status: str = Field(..., min_length=1)
    in_reply_to_id: Optional[str] = None


class CredentialsRequest(BaseModel):
    """Body of PATCH /api/v1/accounts/update_credentials."""
    display_name: Optional[str] = None
    note: Optional[str] = None


# ========================================
# Serialisers
# ========================================

def account_json(account: Account) -> Dict[str, Any]:
    return {
        "id": account.id,
        "username": account.username,
        "acct": account.username,
        "display_name": account.display_name,
        "note": account.bio,
    }


def status_json(emulator: PlatformEmulator, toot: Toot) -> Dict[str, Any]:
    reblog = None
    if toot.boost_of is not None:
        reblog = status_json(emulator, emulator.get_toot(toot.boost_of))
    return {
        "id": toot.id,
        "created_at": toot.created_at.isoformat(),
        "content": toot.text,
        "account": account_json(emulator.account(toot.author)),
        "in_reply_to_id": toot.in_reply_to,
        "mentions": [account_json(emulator.account(m)) for m in toot.mentions],
        "reblog": reblog,
        "favourites_count": emulator.favorites_of(toot.id),
    }


def relationship_json(emulator: PlatformEmulator, actor: str, target: str) -> Dict[str, Any]:
    return {
        "id": target,
        "following": target in emulator.following(actor),
        "followed_by": actor in emulator.following(target),
        "blocking": emulator.is_blocking(actor, target),
        "blocked_by": emulator.is_blocking(target, actor),
    }


# ========================================
# App factory
# ========================================

def create_app(emulator: PlatformEmulator) -> FastAPI:
    """Build a FastAPI app serving the given emulator."""
    app = FastAPI(
        title="Mastosim Platform Emulator",
        description="Mastodon v1 subset backed by the in-process emulator",
        version="0.1.0",
    )

    @app.exception_handler(PlatformError)
    async def platform_error_handler(request: Request, exc: PlatformError):
        if isinstance(exc, UnknownTargetError):
            status = 404
        elif isinstance(exc, BlockedInteractionError):
            status = 403
        else:
            status = 422
        if isinstance(exc, OversizeTootError):
            message = f"Validation failed: Text character limit of {MAX_TOOT_CHARS} exceeded"
        else:
            message = str(exc)
        logger.debug(f"{request.method} {request.url.path} -> {status}: {message}")
        return JSONResponse(status_code=status, content={"error": message})

    def current_account(authorization: Optional[str] = Header(None)) -> str:
        if not authorization or not authorization.startswith("Bearer "):
            raise HTTPException(status_code=401, detail="The access token is invalid")
        account_id = emulator.account_for_token(authorization[len("Bearer "):])
        if account_id is None:
            raise HTTPException(status_code=401, detail="The access token is invalid")
        return account_id

    @app.get("/ping", tags=["health"])
    async def ping():
        return {"status": "alive", "service": "mastosim-emulator"}

    # ---- accounts ----

    @app.get("/api/v1/accounts/verify_credentials", tags=["accounts"])
    def verify_credentials(me: str = Depends(current_account)):
        return account_json(emulator.account(me))

    @app.patch("/api/v1/accounts/update_credentials", tags=["accounts"])
    def update_credentials(body: CredentialsRequest, me: str = Depends(current_account)):
        current = emulator.account(me)
        bio = body.note if body.note is not None else current.bio
        emulator.update_profile(me, bio, display_name=body.display_name)
        return account_json(emulator.account(me))

    @app.get("/api/v1/accounts/lookup", tags=["accounts"])
    def lookup(acct: str, me: str = Depends(current_account)):
        return account_json(emulator.account(emulator.lookup(acct)))

    @app.get("/api/v1/accounts/relationships", tags=["accounts"])
    def relationships(request: Request, me: str = Depends(current_account)) -> List[Dict[str, Any]]:
        ids = request.query_params.getlist("id[]") or request.query_params.getlist("id")
        return [relationship_json(emulator, me, target) for target in ids]

    @app.get("/api/v1/accounts/{account_id}", tags=["accounts"])
    def get_account(account_id: str, me: str = Depends(current_account)):
        return account_json(emulator.account(account_id))

    @app.get("/api/v1/accounts/{account_id}/following", tags=["accounts"])
    def following(account_id: str, limit: int = Query(40, ge=1, le=80), me: str = Depends(current_account)):
        ids = sorted(emulator.following(account_id), key=int)[:limit]
        return [account_json(emulator.account(i)) for i in ids]

    @app.get("/api/v1/accounts/{account_id}/statuses", tags=["accounts"])
    def account_statuses(account_id: str, limit: int = Query(20, ge=1, le=40), me: str = Depends(current_account)):
        return [status_json(emulator, t) for t in emulator.get_account_timeline(me, account_id, limit)]

    def relationship_action(verb: str):
        def handler(account_id: str, me: str = Depends(current_account)):
            getattr(emulator, verb)(me, account_id)
            return relationship_json(emulator, me, account_id)
        handler.__name__ = verb
        return handler

    for verb in ("follow", "unfollow", "block", "unblock"):
        app.post(f"/api/v1/accounts/{{account_id}}/{verb}", tags=["accounts"])(relationship_action(verb))

    # ---- statuses ----

    @app.post("/api/v1/statuses", tags=["statuses"])
    def create_status(body: StatusRequest, me: str = Depends(current_account)):
        if body.in_reply_to_id:
            toot = emulator.reply(me, body.in_reply_to_id, body.status)
        else:
            toot = emulator.post_toot(me, body.status)
        return status_json(emulator, toot)

    @app.get("/api/v1/statuses/{status_id}", tags=["statuses"])
    def get_status(status_id: str, me: str = Depends(current_account)):
        return status_json(emulator, emulator.get_toot(status_id))

    @app.post("/api/v1/statuses/{status_id}/reblog", tags=["statuses"])
    def reblog(status_id: str, me: str = Depends(current_account)):
        return status_json(emulator, emulator.boost(me, status_id))

    @app.post("/api/v1/statuses/{status_id}/favourite", tags=["statuses"])
    def favourite(status_id: str, me: str = Depends(current_account)):
        emulator.favorite(me, status_id)
        return status_json(emulator, emulator.get_toot(status_id))

    # ---- timelines ----

    @app.get("/api/v1/timelines/home", tags=["timelines"])
    def home(limit: int = Query(20, ge=1, le=40), me: str = Depends(current_account)):
        return [status_json(emulator, t) for t in emulator.get_home_timeline(me, limit)]

    return app
