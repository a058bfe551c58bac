import type { Envelope } from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, message: string, readonly field?: string) {
    super(message);
  }
}

async function check(res: Response): Promise<any> {
  const body = await res.json().catch(() => ({}));
  if (!res.ok) {
    throw new ApiError(res.status, body.error ?? res.statusText, body.field);
  }
  return body;
}

export class Api {
  constructor(readonly baseUrl: string = "") {}

  async createSession(form: FormData): Promise<Envelope> {
    return check(await fetch(`${this.baseUrl}/v1/sessions`, {
      method: "POST",
      body: form,
    }));
  }

  async getSession(id: string): Promise<Envelope> {
    return check(await fetch(`${this.baseUrl}/v1/sessions/${id}`));
  }

  async startDrag(id: string): Promise<void> {
    await check(await fetch(`${this.baseUrl}/v1/sessions/${id}/drag`, { method: "POST" }));
  }

  async dragBack(id: string): Promise<{ child_id: string }> {
    return check(await fetch(`${this.baseUrl}/v1/sessions/${id}/dragback`,
                             { method: "POST" }));
  }

  async report(id: string): Promise<any> {
    return check(await fetch(`${this.baseUrl}/v1/sessions/${id}/report`));
  }

  resultUrl(id: string): string {
    return `${this.baseUrl}/v1/sessions/${id}/result`;
  }

  async waitPrepared(id: string, timeoutMs = 120000): Promise<Envelope> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const env = await this.getSession(id);
      if (env.prepared || env.status === "failed") return env;
      if (Date.now() > deadline) throw new ApiError(408, "prepare timed out");
      await new Promise((r) => setTimeout(r, 300));
    }
  }
}
